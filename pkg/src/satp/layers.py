"""Small neural layers shared by the predictor, self-awareness and baseline models.

Weight matrices use uniform Xavier/Glorot initialization, biases start at
zero, and batch-norm starts at scale 1 / shift 0.  Every layer registers its
tensors in a ParameterSet under a dotted name prefix so checkpoints and the
optimizer see one flat namespace.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParameterSet
from .rng import Rng


def xavier_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    """Affine map (batch, in) -> (batch, out)."""

    def __init__(self, ps: ParameterSet, name: str, in_dim: int, out_dim: int, rng: Rng):
        self.w = ps.add(f"{name}.w", xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim))
        self.b = ps.add(f"{name}.b", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, ad.transpose(self.w)), self.b)


class GRU:
    """Stacked GRU cells stepped manually, with optional inter-layer dropout."""

    def __init__(self, ps: ParameterSet, name: str, in_dim: int, hidden: int, layers: int, rng: Rng):
        self.hidden = hidden
        self.layers = layers
        self.weights = []
        for layer in range(layers):
            d = in_dim if layer == 0 else hidden
            w_ih = ps.add(f"{name}.l{layer}.w_ih", xavier_uniform(rng, (3 * hidden, d), d, hidden))
            w_hh = ps.add(f"{name}.l{layer}.w_hh", xavier_uniform(rng, (3 * hidden, hidden), hidden, hidden))
            b_ih = ps.add(f"{name}.l{layer}.b_ih", np.zeros(3 * hidden))
            b_hh = ps.add(f"{name}.l{layer}.b_hh", np.zeros(3 * hidden))
            self.weights.append((w_ih, w_hh, b_ih, b_hh))

    def initial_state(self, batch: int) -> list[Tensor]:
        return [ad.constant(np.zeros((batch, self.hidden))) for _ in range(self.layers)]

    def step(
        self,
        x: Tensor,
        state: list[Tensor],
        *,
        dropout_rate: float = 0.0,
        dropout_rng: Rng | None = None,
    ) -> list[Tensor]:
        new_state = []
        inp = x
        for layer, (w_ih, w_hh, b_ih, b_hh) in enumerate(self.weights):
            if layer > 0 and dropout_rate > 0.0 and dropout_rng is not None:
                inp = ad.dropout(inp, dropout_rate, dropout_rng)
            h = ad.gru_step(inp, state[layer], w_ih, w_hh, b_ih, b_hh)
            new_state.append(h)
            inp = h
        return new_state

    def run(
        self,
        xs: list[Tensor],
        state: list[Tensor] | None = None,
        *,
        dropout_rate: float = 0.0,
        dropout_rng: Rng | None = None,
    ) -> tuple[list[Tensor], list[Tensor]]:
        """Feed a sequence; returns (top-layer outputs, final state)."""
        if state is None:
            state = self.initial_state(xs[0].shape[0])
        outputs = []
        for x in xs:
            state = self.step(x, state, dropout_rate=dropout_rate, dropout_rng=dropout_rng)
            outputs.append(state[-1])
        return outputs, state


class LSTM:
    """Stacked LSTM cells stepped manually."""

    def __init__(self, ps: ParameterSet, name: str, in_dim: int, hidden: int, layers: int, rng: Rng):
        self.hidden = hidden
        self.layers = layers
        self.weights = []
        for layer in range(layers):
            d = in_dim if layer == 0 else hidden
            w_ih = ps.add(f"{name}.l{layer}.w_ih", xavier_uniform(rng, (4 * hidden, d), d, hidden))
            w_hh = ps.add(f"{name}.l{layer}.w_hh", xavier_uniform(rng, (4 * hidden, hidden), hidden, hidden))
            b_ih = ps.add(f"{name}.l{layer}.b_ih", np.zeros(4 * hidden))
            b_hh = ps.add(f"{name}.l{layer}.b_hh", np.zeros(4 * hidden))
            self.weights.append((w_ih, w_hh, b_ih, b_hh))

    def initial_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        zeros = lambda: ad.constant(np.zeros((batch, self.hidden)))  # noqa: E731
        return [(zeros(), zeros()) for _ in range(self.layers)]

    def run(self, xs: list[Tensor]) -> list[Tensor]:
        state = self.initial_state(xs[0].shape[0])
        outputs = []
        for x in xs:
            inp = x
            new_state = []
            for layer, (w_ih, w_hh, b_ih, b_hh) in enumerate(self.weights):
                h, c = ad.lstm_step(inp, state[layer][0], state[layer][1], w_ih, w_hh, b_ih, b_hh)
                new_state.append((h, c))
                inp = h
            state = new_state
            outputs.append(state[-1][0])
        return outputs


class TemporalConv:
    """Time-axis convolution over (C, T, N) tensors with zero padding."""

    def __init__(self, ps: ParameterSet, name: str, in_ch: int, out_ch: int, kernel: int, rng: Rng):
        fan_in = in_ch * kernel
        fan_out = out_ch * kernel
        self.w = ps.add(f"{name}.w", xavier_uniform(rng, (out_ch, in_ch, kernel), fan_in, fan_out))
        self.b = ps.add(f"{name}.b", np.zeros(out_ch))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d_time(x, self.w, self.b)


class BatchNorm:
    """Per-channel batch norm over (C, T, N); running stats live in `buffers`."""

    def __init__(self, ps: ParameterSet, buffers: dict[str, np.ndarray], name: str, channels: int):
        self.gamma = ps.add(f"{name}.gamma", np.ones(channels))
        self.beta = ps.add(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        buffers[f"{name}.running_mean"] = self.running_mean
        buffers[f"{name}.running_var"] = self.running_var

    def __call__(self, x: Tensor, *, training: bool, mask: np.ndarray | None = None) -> Tensor:
        return ad.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            mask=mask,
        )
