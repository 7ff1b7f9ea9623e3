"""Comparison diagnostics: maneuver uncertainty (NMaP, APE/FPE), MC dropout,
deep ensembles, and autoencoder reconstruction error.

Every diagnostic here is oriented so that larger means predicted-to-be-worse,
which lets all of them feed the same cutoff-curve machinery unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor
from .layers import GRU, Linear
from .optim import ParameterSet
from .predictor import FixedGraph, SceneTensor, TrajectoryPredictor
from .rng import Rng

ENTROPY_FLOOR_EPS = 1e-6  # m^2, regularizes degenerate position spreads
MANEUVER_NAMES = ("left", "straight", "right")
HEADING_THRESHOLD_DEG = 15.0


@dataclass
class SampleBundle:
    """M candidate trajectories per agent with per-agent member weights."""

    positions: np.ndarray  # (M, n, fut_len, 2)
    weights: np.ndarray  # (n, M), rows sum to 1
    valid: np.ndarray  # (n,) bool

    def __post_init__(self):
        row_sums = self.weights.sum(axis=1)
        if (self.weights < 0).any() or np.abs(row_sums[self.valid] - 1.0).max(initial=0.0) > 1e-9:
            raise ValueError("SampleBundle: weights must be non-negative and sum to 1")

    @property
    def members(self) -> int:
        return self.positions.shape[0]

    def mean_trajectory(self) -> np.ndarray:
        """Weight-weighted member mean, the bundle's point prediction."""
        return np.einsum("nm,mntc->ntc", self.weights, self.positions)


def maneuver_labels(hist: np.ndarray, fut: np.ndarray) -> np.ndarray:
    """Ground-truth maneuver per agent from the future heading change.

    Left if the heading turns more than +15 degrees, right below -15, else
    straight; near-stationary futures count as straight.
    """
    n = hist.shape[0]
    labels = np.full(n, MANEUVER_NAMES.index("straight"), dtype=np.int64)
    first = fut[:, 0] - hist[:, -1]
    last = fut[:, -1] - fut[:, -2] if fut.shape[1] >= 2 else first
    moving = (np.linalg.norm(first, axis=1) > 1e-6) & (np.linalg.norm(last, axis=1) > 1e-6)
    h0 = np.arctan2(first[:, 1], first[:, 0])
    h1 = np.arctan2(last[:, 1], last[:, 0])
    delta = np.degrees(np.arctan2(np.sin(h1 - h0), np.cos(h1 - h0)))
    labels[moving & (delta > HEADING_THRESHOLD_DEG)] = MANEUVER_NAMES.index("left")
    labels[moving & (delta < -HEADING_THRESHOLD_DEG)] = MANEUVER_NAMES.index("right")
    return labels


class ManeuverHead:
    """Per-agent maneuver classifier on the time-pooled graph feature."""

    def __init__(self, feat_channels: int, hidden: int, rng: Rng, maneuvers: int = 3):
        self.maneuvers = maneuvers
        self.params = ParameterSet()
        self.fc1 = Linear(self.params, "head.fc1", feat_channels, hidden, rng)
        self.fc2 = Linear(self.params, "head.fc2", hidden, maneuvers, rng)

    def logits(self, gf: Tensor) -> Tensor:
        pooled = ad.permute(ad.reduce_mean(gf, axis=1), (1, 0))  # (n, C)
        return self.fc2(ad.relu(self.fc1(pooled)))

    def probabilities(self, gf: Tensor) -> Tensor:
        return ad.softmax(self.logits(gf), axis=1)


def cross_entropy(logits: Tensor, labels: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over valid agents."""
    n_valid = int(valid.sum())
    if n_valid < 1:
        raise ValueError("cross_entropy: no valid agents")
    n, k = logits.shape
    shift = ad.constant(logits.data.max(axis=1, keepdims=True))
    centered = ad.sub(logits, shift)
    log_norm = ad.log(ad.reduce_sum(ad.exp(centered), axis=1))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.reduce_sum(ad.mul(centered, ad.constant(onehot)), axis=1)
    weights = ad.constant(valid.astype(np.float64) / n_valid)
    return ad.reduce_sum(ad.mul(ad.sub(log_norm, picked), weights))


def mu_forward(
    predictor: TrajectoryPredictor,
    head: ManeuverHead,
    scene: SceneTensor,
    graph: FixedGraph,
) -> tuple[SampleBundle, np.ndarray, np.ndarray]:
    """Decode once per maneuver; returns (bundle, probabilities, point prediction).

    The point prediction is the trajectory of each agent's maximum-probability
    maneuver.
    """
    if predictor.cfg.maneuvers != head.maneuvers:
        raise ValueError("mu_forward: predictor is not maneuver-conditioned")
    gf = predictor.graph_feature(scene, graph, training=False)
    probs = head.probabilities(gf).data
    n = probs.shape[0]
    members = []
    for k in range(head.maneuvers):
        onehot = np.zeros((n, head.maneuvers))
        onehot[:, k] = 1.0
        members.append(predictor.decode(gf, scene, maneuver=onehot).positions.data)
    positions = np.stack(members)
    weights = np.where(scene.valid[:, None], probs, 1.0 / head.maneuvers)
    weights = weights / weights.sum(axis=1, keepdims=True)
    bundle = SampleBundle(positions=positions, weights=weights, valid=scene.valid.copy())
    point = positions[probs.argmax(axis=1), np.arange(n)]
    return bundle, probs, point


def nmap(probs: np.ndarray) -> np.ndarray:
    """Negative maximum softmax probability; higher means less confident."""
    return -np.asarray(probs).max(axis=-1)


def predictive_entropy(bundle: SampleBundle, t: int) -> np.ndarray:
    """Gaussian differential entropy of the member position spread at step t."""
    pos = bundle.positions[:, :, t, :]  # (M, n, 2)
    mu = np.einsum("nm,mnc->nc", bundle.weights, pos)
    centered = pos - mu[None, :, :]
    cov = np.einsum("nm,mnc,mnd->ncd", bundle.weights, centered, centered)
    cov = cov + ENTROPY_FLOOR_EPS * np.eye(2)[None]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    return 0.5 * np.log(((2.0 * math.pi * math.e) ** 2) * det)


def ape_fpe(bundle: SampleBundle) -> tuple[np.ndarray, np.ndarray]:
    """Average and final predictive entropy per agent."""
    fut_len = bundle.positions.shape[2]
    steps = np.stack([predictive_entropy(bundle, t) for t in range(fut_len)])
    return steps.mean(axis=0), steps[-1]


def mc_dropout_predict(
    predictor: TrajectoryPredictor,
    scene: SceneTensor,
    graph: FixedGraph,
    rng: Rng,
    samples: int = 5,
) -> SampleBundle:
    """Stochastic forwards with dropout left on; uniform member weights."""
    rate = predictor.cfg.dropout
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"mc_dropout_predict: dropout rate must be in [0, 1), got {rate}")
    members = []
    for m in range(samples):
        _, pred = predictor.forward(scene, graph, training=False, dropout_rng=rng.spawn(m))
        members.append(pred.positions.data)
    n = members[0].shape[0]
    weights = np.full((n, samples), 1.0 / samples)
    return SampleBundle(positions=np.stack(members), weights=weights, valid=scene.valid.copy())


def ensemble_predict(
    submodels: list[TrajectoryPredictor],
    scene: SceneTensor,
    graph: FixedGraph,
    expected_members: int = 5,
) -> SampleBundle:
    """One forward per independently trained submodel; uniform weights."""
    if len(submodels) != expected_members:
        raise ValueError(f"ensemble_predict: got {len(submodels)} submodels, expected {expected_members}")
    members = [m.forward(scene, graph, training=False)[1].positions.data for m in submodels]
    n = members[0].shape[0]
    weights = np.full((n, len(submodels)), 1.0 / len(submodels))
    return SampleBundle(positions=np.stack(members), weights=weights, valid=scene.valid.copy())


class HistoryDecoder:
    """Autoencoder-style head: decode the graph feature back into history offsets."""

    def __init__(self, feat_channels: int, hidden: int, rng: Rng):
        self.params = ParameterSet()
        self.gru = GRU(self.params, "ae_decoder", feat_channels, hidden, 2, rng)
        self.out = Linear(self.params, "ae_out", hidden, 2, rng)

    def forward(self, gf: Tensor) -> Tensor:
        """Reconstruct (n, hist_len, 2) anchor-relative history positions."""
        t_h = gf.shape[1]
        steps = [ad.permute(ad.index_axis(gf, 1, k), (1, 0)) for k in range(t_h)]
        outputs, _ = self.gru.run(steps)
        return ad.stack([self.out(h) for h in outputs], axis=1)


def ae_reconstruct(decoder: HistoryDecoder, gf: Tensor, scene: SceneTensor) -> tuple[Tensor, np.ndarray]:
    """Reconstruction plus per-agent mean distance to the true history."""
    recon = decoder.forward(gf)
    true_hist = scene.values[0:2].transpose(2, 1, 0)  # (n, hist_len, 2) offsets
    if recon.shape != true_hist.shape:
        raise ShapeMismatchError(f"ae_reconstruct: recon {recon.shape} vs history {true_hist.shape}")
    errors = np.linalg.norm(recon.data - true_hist, axis=2).mean(axis=1)
    return recon, errors


def ae_loss(recon: Tensor, scene: SceneTensor) -> Tensor:
    """Training loss for the reconstruction head, masked to valid agents."""
    true_hist = scene.values[0:2].transpose(2, 1, 0)
    n_valid = int(scene.valid.sum())
    if n_valid < 1:
        raise ValueError("ae_loss: no valid agents")
    dists = ad.l2_norm(ad.sub(recon, ad.constant(true_hist)))
    weights = scene.valid.astype(np.float64)[:, None] / (n_valid * true_hist.shape[1])
    return ad.reduce_sum(ad.mul(dists, ad.constant(weights)))
