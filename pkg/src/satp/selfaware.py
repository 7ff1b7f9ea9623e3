"""The self-awareness module: estimates the predictor's own per-step error.

A GRU Seq2Seq processes the predictor's middle-layer graph feature into a
per-step representation the same length as the predicted trajectory, fuses it
with the predicted per-step displacements (ignored / added / concatenated),
and regresses one error estimate per future step.  Error labels come from the
distance between predicted and true positions, optionally split per
coordinate or differenced into velocities.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor
from .layers import GRU, LSTM, Linear, TemporalConv
from .optim import ParameterSet
from .rng import Rng
from .predictor import PredictedTrajectories

SAMPLE_RATE_HZ = 2.0


class Fusion(str, Enum):
    GF = "gf"  # graph feature only, prediction ignored
    ADD = "add"
    CONCAT = "concat"


class Estimator(str, Enum):
    NONE = "none"
    MLP = "mlp"
    CONV = "conv"
    LSTM = "lstm"


class LabelForm(str, Enum):
    VELOCITY = "velocity"
    POSITION_XY = "position_xy"
    DISTANCE = "distance"

    @property
    def width(self) -> int:
        return 1 if self is LabelForm.DISTANCE else 2


@dataclass(frozen=True)
class SaConfig:
    fusion: Fusion = Fusion.CONCAT
    estimator: Estimator = Estimator.LSTM
    label_form: LabelForm = LabelForm.DISTANCE
    hidden: int = 64


@dataclass
class DiagnosticSequence:
    values: Tensor  # (n, fut_len, d)
    valid: np.ndarray  # (n,) bool


class SelfAwareness:
    """Graph-feature Seq2Seq, feature fusion, and the error estimation head."""

    def __init__(self, cfg: SaConfig, feat_channels: int, rng: Rng):
        self.cfg = cfg
        self.feat_channels = feat_channels
        self.params = ParameterSet()
        h = cfg.hidden
        self.encoder = GRU(self.params, "gf_encoder", feat_channels, h, 2, rng)
        self.decoder = GRU(self.params, "gf_decoder", h, h, 2, rng)
        if cfg.fusion is Fusion.ADD:
            self.add_proj = Linear(self.params, "fuse_proj", h, 2, rng)
        fused = {Fusion.GF: h, Fusion.ADD: 2, Fusion.CONCAT: h + 2}[cfg.fusion]
        d = cfg.label_form.width
        if cfg.estimator is Estimator.NONE:
            # no estimation submodule: a single linear readout to the outputs
            self.readout = Linear(self.params, "readout", fused, d, rng)
        else:
            self.est_in = Linear(self.params, "est_in", fused, h, rng)
            if cfg.estimator is Estimator.MLP:
                self.core_mlp = Linear(self.params, "core_mlp", h, h, rng)
            elif cfg.estimator is Estimator.CONV:
                self.core_conv = TemporalConv(self.params, "core_conv", h, h, 3, rng)
            elif cfg.estimator is Estimator.LSTM:
                self.core_lstm = LSTM(self.params, "core_lstm", h, h, 2, rng)
            self.est_out = Linear(self.params, "est_out", h, d, rng)

    def forward(self, gf: Tensor, pred: PredictedTrajectories) -> DiagnosticSequence:
        """Estimate per-step errors for every agent slot of one scene."""
        if gf.shape[0] != self.feat_channels:
            raise ShapeMismatchError(
                f"selfaware: graph feature channels {gf.shape[0]} != {self.feat_channels}")
        t_h, n = gf.shape[1], gf.shape[2]
        fut_len = pred.increments.shape[1]
        if pred.increments.shape[0] != n:
            raise ShapeMismatchError(
                f"selfaware: prediction for {pred.increments.shape[0]} agents vs graph feature {n}")

        steps = [ad.permute(ad.index_axis(gf, 1, k), (1, 0)) for k in range(t_h)]
        _, state = self.encoder.run(steps)
        dec_in = ad.constant(np.zeros((n, self.cfg.hidden)))  # first decoding step is zero
        processed = []
        for _ in range(fut_len):
            state = self.decoder.step(dec_in, state)
            processed.append(state[-1])
            dec_in = state[-1]

        if self.cfg.fusion is Fusion.GF:
            fused = processed
        else:
            incs = [ad.index_axis(pred.increments, 1, k) for k in range(fut_len)]
            if self.cfg.fusion is Fusion.ADD:
                fused = [ad.add(self.add_proj(p), i) for p, i in zip(processed, incs)]
            else:
                fused = [ad.concat([p, i], axis=1) for p, i in zip(processed, incs)]

        if self.cfg.estimator is Estimator.NONE:
            outs = [self.readout(f) for f in fused]
        else:
            hidden = [ad.relu(self.est_in(f)) for f in fused]
            if self.cfg.estimator is Estimator.MLP:
                hidden = [ad.relu(self.core_mlp(x)) for x in hidden]
            elif self.cfg.estimator is Estimator.CONV:
                seq = ad.permute(ad.stack(hidden, axis=1), (2, 1, 0))  # (h, t, n)
                seq = ad.relu(self.core_conv(seq))
                hidden = [ad.permute(ad.index_axis(seq, 1, k), (1, 0)) for k in range(fut_len)]
            elif self.cfg.estimator is Estimator.LSTM:
                hidden = self.core_lstm.run(hidden)
            outs = [self.est_out(x) for x in hidden]

        z = ad.stack(outs, axis=1)  # (n, fut_len, d)
        if self.cfg.label_form is LabelForm.DISTANCE:
            z = ad.relu(z)  # the non-negativity contract for distance outputs
        z = ad.mul(z, ad.constant(pred.valid.astype(np.float64)[:, None, None]))
        return DiagnosticSequence(values=z, valid=pred.valid.copy())


def error_labels(
    truth: np.ndarray,
    pred_positions: np.ndarray,
    anchors: np.ndarray,
    form: LabelForm,
    rate_hz: float = SAMPLE_RATE_HZ,
) -> np.ndarray:
    """Per-step error labels of shape (n, fut_len, d) for one scene."""
    if truth.shape != pred_positions.shape:
        raise ShapeMismatchError(f"error_labels: truth {truth.shape} vs pred {pred_positions.shape}")
    if form is LabelForm.DISTANCE:
        return np.linalg.norm(truth - pred_positions, axis=2)[..., None]
    if form is LabelForm.POSITION_XY:
        return np.abs(truth - pred_positions)
    # velocity: difference quotients with the anchor as the step-zero position
    t_width = np.concatenate([anchors[:, None, :], truth], axis=1)
    p_width = np.concatenate([anchors[:, None, :], pred_positions], axis=1)
    v_true = np.diff(t_width, axis=1) * rate_hz
    v_pred = np.diff(p_width, axis=1) * rate_hz
    return np.abs(v_true - v_pred)


def taped_error_labels(
    truth: np.ndarray,
    positions: Tensor,
    anchors: np.ndarray,
    form: LabelForm,
    rate_hz: float = SAMPLE_RATE_HZ,
) -> Tensor:
    """Error labels as tape tensors, so joint training differentiates through
    the label as well as the estimate."""
    if truth.shape != positions.shape:
        raise ShapeMismatchError(f"taped_error_labels: truth {truth.shape} vs pred {positions.shape}")
    diff = ad.sub(ad.constant(truth), positions)
    if form is LabelForm.DISTANCE:
        return ad.reshape(ad.l2_norm(diff), (*diff.shape[:2], 1))
    if form is LabelForm.POSITION_XY:
        return ad.absolute(diff)
    n, fut_len, _ = truth.shape
    steps_t = [ad.constant(truth[:, 0] - anchors)] + [
        ad.constant(truth[:, k] - truth[:, k - 1]) for k in range(1, fut_len)]
    first = ad.sub(ad.index_axis(positions, 1, 0), ad.constant(anchors))
    steps_p = [first] + [
        ad.sub(ad.index_axis(positions, 1, k), ad.index_axis(positions, 1, k - 1))
        for k in range(1, fut_len)]
    rows = [ad.absolute(ad.mul(ad.sub(t, p), rate_hz)) for t, p in zip(steps_t, steps_p)]
    return ad.stack(rows, axis=1)


def sa_loss(labels: np.ndarray, estimate: DiagnosticSequence) -> Tensor:
    """Mean over valid agents of the per-step error-vector norm average."""
    n_valid = int(estimate.valid.sum())
    if n_valid < 1:
        raise ValueError("sa_loss: no valid agents")
    if labels.shape != estimate.values.shape:
        raise ShapeMismatchError(f"sa_loss: labels {labels.shape} vs estimate {estimate.values.shape}")
    per_step = ad.l2_norm(ad.sub(estimate.values, ad.constant(labels)))  # (n, fut_len)
    weights = estimate.valid.astype(np.float64)[:, None] / (n_valid * labels.shape[1])
    return ad.reduce_sum(ad.mul(per_step, ad.constant(weights)))


def integrate_diagnostics(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fold per-step estimates into (ade_estimate, fde_estimate) per agent.

    Vector-valued forms are reduced to per-step norms first.
    """
    if values.ndim != 3:
        raise ShapeMismatchError(f"integrate_diagnostics: expected (n, t, d), got {values.shape}")
    per_step = values[..., 0] if values.shape[2] == 1 else np.linalg.norm(values, axis=2)
    return per_step.mean(axis=1), per_step[:, -1]
