"""The trajectory prediction model: scene tensor and fixed-graph construction,
a graph-convolutional feature stack, and a GRU Seq2Seq decoder.

Per-agent inputs are position offsets against each agent's own current
position (the anchor), so the whole model is exactly translation-equivariant:
shifting a scene shifts every predicted position by the same vector.  The
decoder emits per-step displacement increments that are cumulative-summed
onto the anchor, which also makes the first predicted point continuous with
the observed track.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor
from .data import AGENT_TYPES, Sample
from .layers import BatchNorm, GRU, Linear, TemporalConv
from .optim import ParameterSet
from .rng import Rng

# offsets (x, y) + one-hot agent type + presence flag
SCENE_CHANNELS = 2 + len(AGENT_TYPES) + 1


@dataclass
class SceneTensor:
    """Model input for one scene: (channels, hist_len, n_slots) plus metadata."""

    values: np.ndarray  # (c, t, n)
    mask: np.ndarray  # (t, n) floats in {0, 1}
    agent_ids: list[str]  # length n, "" for padding slots
    anchors: np.ndarray  # (n, 2) position at the current moment
    valid: np.ndarray  # (n,) bool, agent present at the current moment
    source_index: np.ndarray  # (n,) index into the sample's agent list, -1 for padding


@dataclass
class FixedGraph:
    adjacency: np.ndarray  # (n, n), rows of present agents sum to 1


@dataclass
class PredictedTrajectories:
    positions: Tensor  # (n, fut_len, 2) absolute meters; zeros for invalid slots
    increments: Tensor  # (n, fut_len, 2) per-step displacements
    valid: np.ndarray  # (n,) bool


def build_scene(sample: Sample, n_max: int, close_distance: float = 10.0) -> tuple[SceneTensor, FixedGraph]:
    """Sort agents by distance to the scene centroid, pad/truncate to n_max,
    offset against per-agent anchors, and degree-normalize the proximity graph."""
    if sample.n_agents < 1:
        raise ValueError("build_scene: sample has no agents")
    hist_len = sample.hist.shape[1]
    current = sample.hist[:, -1]
    centroid = current.mean(axis=0)
    order = np.argsort(np.linalg.norm(current - centroid, axis=1), kind="stable")[:n_max]
    m = len(order)

    values = np.zeros((SCENE_CHANNELS, hist_len, n_max))
    mask = np.zeros((hist_len, n_max))
    anchors = np.zeros((n_max, 2))
    valid = np.zeros(n_max, dtype=bool)
    source = np.full(n_max, -1, dtype=np.int64)
    ids = [""] * n_max
    for slot, agent in enumerate(order):
        offsets = sample.hist[agent] - current[agent]
        values[0, :, slot] = offsets[:, 0]
        values[1, :, slot] = offsets[:, 1]
        values[2 + AGENT_TYPES.index(sample.types[agent]), :, slot] = 1.0
        values[-1, :, slot] = 1.0
        mask[:, slot] = 1.0
        anchors[slot] = current[agent]
        valid[slot] = True
        source[slot] = agent
        ids[slot] = sample.track_ids[agent]

    adjacency = np.zeros((n_max, n_max))
    pos = anchors[:m]
    dists = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    close = (dists < close_distance).astype(np.float64)
    np.fill_diagonal(close[:m, :m], 1.0)
    degrees = close.sum(axis=1)
    adjacency[:m, :m] = close / degrees[:, None]

    scene = SceneTensor(values=values, mask=mask, agent_ids=ids, anchors=anchors,
                        valid=valid, source_index=source)
    return scene, FixedGraph(adjacency=adjacency)


@dataclass(frozen=True)
class PredictorConfig:
    feat_channels: int = 64
    blocks: int = 3
    kernel: int = 3
    hidden: int = 64
    hist_len: int = 6
    fut_len: int = 6
    dropout: float = 0.0  # >0 only for the MC-dropout baseline variant
    maneuvers: int = 0  # >0 conditions the decoder on a maneuver one-hot


class TrajectoryPredictor:
    """Graph feature extractor plus shared Seq2Seq trajectory decoder."""

    def __init__(self, cfg: PredictorConfig, rng: Rng):
        self.cfg = cfg
        self.params = ParameterSet()
        self.buffers: dict[str, np.ndarray] = {}
        c = cfg.feat_channels
        self.embed = Linear(self.params, "embed", SCENE_CHANNELS, c, rng)
        self.block_mix = []
        self.block_conv = []
        self.block_norm = []
        for b in range(cfg.blocks):
            self.block_mix.append(Linear(self.params, f"block{b}.mix", c, c, rng))
            self.block_conv.append(TemporalConv(self.params, f"block{b}.tconv", c, c, cfg.kernel, rng))
            self.block_norm.append(BatchNorm(self.params, self.buffers, f"block{b}.norm", c))
        self.encoder = GRU(self.params, "encoder", c, cfg.hidden, 2, rng)
        # decoder input: previous increment, last observed increment, maneuver one-hot
        self.decoder = GRU(self.params, "decoder", 4 + cfg.maneuvers, cfg.hidden, 2, rng)
        # the head also sees the observed increment, so constant-velocity motion
        # is reachable as a purely linear readout
        self.head = Linear(self.params, "head", cfg.hidden + 2, 2, rng)

    def _channel_map(self, layer: Linear, x: Tensor) -> Tensor:
        """Apply a 1x1 channel mix to a (C_in, T, N) tensor."""
        c, t, n = x.shape
        flat = ad.reshape(x, (c, t * n))
        mixed = ad.add(ad.matmul(layer.w, flat), ad.reshape(layer.b, (layer.b.shape[0], 1)))
        return ad.reshape(mixed, (mixed.shape[0], t, n))

    def graph_feature(self, scene: SceneTensor, graph: FixedGraph, *, training: bool,
                      dropout_rng: Rng | None = None) -> Tensor:
        if scene.values.shape[0] != SCENE_CHANNELS:
            raise ShapeMismatchError(
                f"predictor: scene channels {scene.values.shape[0]} != {SCENE_CHANNELS}")
        c, t, n = self.cfg.feat_channels, scene.values.shape[1], scene.values.shape[2]
        if graph.adjacency.shape != (n, n):
            raise ShapeMismatchError(f"predictor: adjacency {graph.adjacency.shape} vs {n} agents")
        mask3 = ad.constant(scene.mask[None, :, :])
        agg_t = ad.constant(graph.adjacency.T)

        h = ad.mul(self._channel_map(self.embed, ad.constant(scene.values)), mask3)
        if self.cfg.dropout > 0.0 and dropout_rng is not None:
            h = ad.dropout(h, self.cfg.dropout, dropout_rng)
        for mix, conv, norm in zip(self.block_mix, self.block_conv, self.block_norm):
            y = ad.reshape(ad.matmul(ad.reshape(h, (c * t, n)), agg_t), (c, t, n))
            y = self._channel_map(mix, y)
            y = conv(y)
            y = norm(y, training=training, mask=scene.mask)
            y = ad.mul(ad.relu(y), mask3)
            h = ad.add(h, y)
        return h

    def decode(self, gf: Tensor, scene: SceneTensor, *, maneuver: np.ndarray | None = None,
               dropout_rng: Rng | None = None) -> PredictedTrajectories:
        t, n = gf.shape[1], gf.shape[2]
        rate = self.cfg.dropout if dropout_rng is not None else 0.0
        steps = [ad.permute(ad.index_axis(gf, 1, k), (1, 0)) for k in range(t)]
        _, state = self.encoder.run(steps, dropout_rate=rate, dropout_rng=dropout_rng)

        if t >= 2:
            last_inc = scene.values[0:2, -1, :].T - scene.values[0:2, -2, :].T
        else:
            last_inc = np.zeros((n, 2))
        if self.cfg.maneuvers:
            if maneuver is None or maneuver.shape != (n, self.cfg.maneuvers):
                raise ShapeMismatchError(
                    f"predictor: expected maneuver one-hot of shape ({n}, {self.cfg.maneuvers})")
            onehot = ad.constant(maneuver)
        observed = ad.constant(last_inc)  # kept in every step's input
        inp = observed
        outs = []
        for _ in range(self.cfg.fut_len):
            parts = [inp, observed]
            if self.cfg.maneuvers:
                parts.append(onehot)
            state = self.decoder.step(ad.concat(parts, axis=1), state,
                                      dropout_rate=rate, dropout_rng=dropout_rng)
            inc = self.head(ad.concat([state[-1], observed], axis=1))
            outs.append(inc)
            inp = inc
        increments = ad.stack(outs, axis=1)  # (n, fut_len, 2)
        valid_col = ad.constant(scene.valid.astype(np.float64)[:, None, None])
        increments = ad.mul(increments, valid_col)
        positions = ad.mul(
            ad.add(ad.cumsum(increments, 1), ad.constant(scene.anchors[:, None, :])), valid_col)
        return PredictedTrajectories(positions=positions, increments=increments, valid=scene.valid.copy())

    def forward(self, scene: SceneTensor, graph: FixedGraph, *, training: bool,
                maneuver: np.ndarray | None = None,
                dropout_rng: Rng | None = None) -> tuple[Tensor, PredictedTrajectories]:
        gf = self.graph_feature(scene, graph, training=training, dropout_rng=dropout_rng)
        return gf, self.decode(gf, scene, maneuver=maneuver, dropout_rng=dropout_rng)


def tp_loss(pred: PredictedTrajectories, truth: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean Euclidean distance over valid agents and all future steps."""
    n_valid = int(valid.sum())
    if n_valid < 1:
        raise ValueError("tp_loss: no valid agents")
    if truth.shape != pred.positions.shape:
        raise ShapeMismatchError(f"tp_loss: truth {truth.shape} vs prediction {pred.positions.shape}")
    dists = ad.l2_norm(ad.sub(pred.positions, ad.constant(truth)))  # (n, fut_len)
    weights = valid.astype(np.float64)[:, None] / (n_valid * truth.shape[1])
    return ad.reduce_sum(ad.mul(dists, ad.constant(weights)))


def merge_scenes(
    scene_graphs: list[tuple[SceneTensor, FixedGraph]],
) -> tuple[SceneTensor, FixedGraph, list[slice]]:
    """Stack scenes along the agent axis with a block-diagonal graph.

    Agents of different scenes never interact (their adjacency blocks are
    disjoint), but batch normalization then sees one statistically useful
    batch instead of a handful of cells per scene.  Padding slots are dropped;
    the returned slices map merged rows back to their source scenes.
    """
    values, masks, anchors, sources, blocks, ids = [], [], [], [], [], []
    slices = []
    offset = 0
    for scene, graph in scene_graphs:
        m = int(scene.valid.sum())
        values.append(scene.values[:, :, :m])
        masks.append(scene.mask[:, :m])
        anchors.append(scene.anchors[:m])
        sources.append(scene.source_index[:m])
        blocks.append(graph.adjacency[:m, :m])
        ids.extend(scene.agent_ids[:m])
        slices.append(slice(offset, offset + m))
        offset += m
    adjacency = np.zeros((offset, offset))
    for sl, block in zip(slices, blocks):
        adjacency[sl, sl] = block
    merged = SceneTensor(
        values=np.concatenate(values, axis=2),
        mask=np.concatenate(masks, axis=1),
        agent_ids=ids,
        anchors=np.concatenate(anchors, axis=0),
        valid=np.ones(offset, dtype=bool),
        source_index=np.concatenate(sources),
    )
    return merged, FixedGraph(adjacency=adjacency), slices


def per_sample_weights(slices: list[slice], n_total: int, fut_len: int) -> np.ndarray:
    """Weights giving each scene's agent-and-step mean equal say in a batch."""
    w = np.zeros((n_total, fut_len))
    for sl in slices:
        m = sl.stop - sl.start
        w[sl] = 1.0 / (len(slices) * m * fut_len)
    return w


def scene_truth(sample: Sample, scene: SceneTensor) -> np.ndarray:
    """Future positions rearranged into scene slot order; zeros for padding."""
    fut_len = sample.fut.shape[1]
    truth = np.zeros((len(scene.valid), fut_len, 2))
    for slot, agent in enumerate(scene.source_index):
        if agent >= 0:
            truth[slot] = sample.fut[agent]
    return truth
