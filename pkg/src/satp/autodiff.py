"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records a backward closure on the output tensor; ``backward``
on a scalar loss walks the tape in reverse topological order and accumulates
gradients into every reachable tensor that requires them.  Shapes are checked
eagerly and any non-finite forward or backward value raises immediately, so a
diverging training run fails at the op that produced the NaN.

The op set is intentionally small: exactly what the models in this package
need, plus fused GRU/LSTM steps so recurrent models do not pay per-gate tape
overhead.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .rng import Rng


class ShapeMismatchError(ValueError):
    """Operands with incompatible shapes, reported with the op name."""


class NonFiniteError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class FrozenParameterError(RuntimeError):
    """Attempted to update a frozen ParameterSet."""


def _guard(data: np.ndarray, op: str) -> np.ndarray:
    # a finite sum implies all-finite entries (one reduce, no temporaries);
    # values large enough to overflow the sum are a failure state anyway
    if not math.isfinite(float(data.sum())):
        if np.isfinite(data).all():
            return data
        raise NonFiniteError(f"{op}: non-finite value in result")
    return data


class Tensor:
    """A float64 array plus optional gradient accumulator and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of the value with no tape linkage."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    return Tensor(value)


_grad_state = threading.local()


class no_grad:
    """Context manager: ops inside record nothing on the tape.

    The flag is thread-local so concurrent eval (ablation cells, ensemble
    members) cannot disable taping in another thread's training step.
    """

    def __enter__(self):
        self._prev = getattr(_grad_state, "enabled", True)
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...]) -> Tensor:
    _guard(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = (
        getattr(_grad_state, "enabled", True) and any(p.requires_grad for p in parents))
    out.grad = None
    out._parents = tuple(p for p in parents if p.requires_grad) if out.requires_grad else ()
    out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    _guard(g, "backward")
    if g.shape != t.data.shape:
        raise ShapeMismatchError(f"backward: gradient shape {g.shape} vs tensor {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward: loss must be scalar, got shape {loss.shape}")
    _guard(loss.data, "backward(loss)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    out = _make(data, "add", (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    out = _make(data, "sub", (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    out = _make(data, "mul", (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _make(-a.data, "neg", (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, -g)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, "matmul", (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    out = _make(a.data.reshape(shape), "reshape", (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.reshape(orig))
    return out


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), "permute", (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.transpose(inverse))
    return out


def transpose(a: Tensor) -> Tensor:
    if as_tensor(a).data.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected 2-d, got {as_tensor(a).shape}")
    return permute(a, (1, 0))


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat: empty input")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        ) from None
    out = _make(data, "concat", tuple(tensors))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(lo, hi)
                    _accum(t, np.ascontiguousarray(g[tuple(index)]))
        out._backward = _bw
    return out


def stack(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"stack: mismatched shapes {sorted(shapes)}")
    out = _make(np.stack([t.data for t in tensors], axis=axis), "stack", tuple(tensors))
    if out.requires_grad:
        def _bw(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    _accum(t, np.ascontiguousarray(np.take(g, i, axis=axis)))
        out._backward = _bw
    return out


def index_axis(a: Tensor, axis: int, i: int) -> Tensor:
    """Select one slice along an axis, dropping that axis."""
    a = as_tensor(a)
    out = _make(np.ascontiguousarray(np.take(a.data, i, axis=axis)), "index_axis", (a,))
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            index = [slice(None)] * a.data.ndim
            index[axis] = i
            full[tuple(index)] = g
            _accum(a, full)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # exp saturation still yields exact 0/1
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(s, "sigmoid", (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * s * (1.0 - s))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = _make(t, "tanh", (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * (1.0 - t * t))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.maximum(a.data, 0.0), "relu", (a,))
    if out.requires_grad:
        positive = a.data > 0
        out._backward = lambda g: _accum(a, g * positive)
    return out


def absolute(a) -> Tensor:
    """Elementwise |x| with subgradient 0 at the kink."""
    a = as_tensor(a)
    out = _make(np.abs(a.data), "absolute", (a,))
    if out.requires_grad:
        sign = np.sign(a.data)
        out._backward = lambda g: _accum(a, g * sign)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    out = _make(e, "exp", (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * e)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    out = _make(data, "log", (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g / a.data)
    return out


def softmax(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, "softmax", (a,))
    if out.requires_grad:
        def _bw(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(a, s * (g - dot))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions and sequence ops
# ---------------------------------------------------------------------------


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.sum(axis=axis), "sum", (a,))
    if out.requires_grad:
        def _bw(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, a.shape).copy())
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())
        out._backward = _bw
    return out


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    out = _make(a.data.mean(axis=axis), "mean", (a,))
    if out.requires_grad:
        def _bw(g):
            scaled = g / count
            if axis is None:
                _accum(a, np.broadcast_to(scaled, a.shape).copy())
            else:
                _accum(a, np.broadcast_to(np.expand_dims(scaled, axis), a.shape).copy())
        out._backward = _bw
    return out


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=-1))
    out = _make(norms, "l2_norm", (a,))
    if out.requires_grad:
        def _bw(g):
            safe = np.where(norms > 0.0, norms, 1.0)
            _accum(a, (g / safe)[..., None] * a.data * (norms > 0.0)[..., None])
        out._backward = _bw
    return out


def cumsum(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    out = _make(np.cumsum(a.data, axis=axis), "cumsum", (a,))
    if out.requires_grad:
        def _bw(g):
            _accum(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))
        out._backward = _bw
    return out


def dropout(a: Tensor, rate: float, rng: Rng) -> Tensor:
    """Inverted dropout: kept entries scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    a = as_tensor(a)
    if rate == 0.0:
        return a
    mask = (rng.uniform(size=a.shape) >= rate) / (1.0 - rate)
    out = _make(a.data * mask, "dropout", (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * mask)
    return out


# ---------------------------------------------------------------------------
# convolution and normalization over (channels, time, agents) tensors
# ---------------------------------------------------------------------------


def conv1d_time(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1-D convolution along the time axis of a (C_in, T, N) tensor.

    Zero padding keeps T; channels mix fully.  w is (C_out, C_in, K),
    b is (C_out,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeMismatchError(f"conv1d_time: input {x.shape} vs weight {w.shape}")
    c_out, c_in, k = w.shape
    if b.shape != (c_out,):
        raise ShapeMismatchError(f"conv1d_time: bias {b.shape} vs C_out {c_out}")
    _, t_len, n = x.shape
    left = (k - 1) // 2
    right = k // 2
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    data = np.broadcast_to(b.data[:, None, None], (c_out, t_len, n)).copy()
    for j in range(k):
        data += np.tensordot(w.data[:, :, j], xp[:, j:j + t_len, :], axes=([1], [0]))
    out = _make(data, "conv1d_time", (x, w, b))
    if out.requires_grad:
        def _bw(g):
            if b.requires_grad:
                _accum(b, g.sum(axis=(1, 2)))
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for j in range(k):
                    gw[:, :, j] = np.tensordot(g, xp[:, j:j + t_len, :], axes=([1, 2], [1, 2]))
                _accum(w, gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[:, j:j + t_len, :] += np.tensordot(w.data[:, :, j].T, g, axes=([1], [0]))
                _accum(x, gxp[:, left:left + t_len, :])
        out._backward = _bw
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Per-channel batch normalization of a (C, T, N) tensor.

    Train mode normalizes with population statistics over the (T, N) cells
    selected by `mask` (all cells when None) and updates the running buffers
    in place with the given momentum.  Eval mode uses the running buffers and
    mutates nothing, so repeated eval passes are bit-identical.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f"batch_norm: scale/shift {gamma.shape}/{beta.shape} vs channels {c}")
    if training:
        m_arr = np.ones(x.shape[1:]) if mask is None else np.asarray(mask, dtype=np.float64)
        if m_arr.shape != x.shape[1:]:
            raise ShapeMismatchError(f"batch_norm: mask {m_arr.shape} vs cells {x.shape[1:]}")
        count = m_arr.sum()
        if count < 1:
            raise ShapeMismatchError("batch_norm: mask selects no cells")
        mean = (x.data * m_arr).sum(axis=(1, 2)) / count
        centered = x.data - mean[:, None, None]
        var = (centered * centered * m_arr).sum(axis=(1, 2)) / count
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
        centered = x.data - mean[:, None, None]
        m_arr = None
        count = 0.0
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std[:, None, None]
    data = gamma.data[:, None, None] * x_hat + beta.data[:, None, None]
    out = _make(data, "batch_norm", (x, gamma, beta))
    if out.requires_grad:
        def _bw(g):
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(1, 2)))
            if gamma.requires_grad:
                _accum(gamma, (g * x_hat).sum(axis=(1, 2)))
            if x.requires_grad:
                scale = (gamma.data * inv_std)[:, None, None]
                if training:
                    sum_g = g.sum(axis=(1, 2), keepdims=True)
                    sum_gx = (g * x_hat).sum(axis=(1, 2), keepdims=True)
                    _accum(x, scale * (g - m_arr * (sum_g + x_hat * sum_gx) / count))
                else:
                    _accum(x, scale * g)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# fused recurrent steps
# ---------------------------------------------------------------------------


def _check_rnn_shapes(op, x, h, w_ih, w_hh, b_ih, b_hh, gates):
    batch, in_dim = x.shape
    hidden = h.shape[1]
    if h.shape[0] != batch:
        raise ShapeMismatchError(f"{op}: batch mismatch x {x.shape} vs h {h.shape}")
    if w_ih.shape != (gates * hidden, in_dim) or w_hh.shape != (gates * hidden, hidden):
        raise ShapeMismatchError(f"{op}: weights {w_ih.shape}/{w_hh.shape} vs input {in_dim}, hidden {hidden}")
    if b_ih.shape != (gates * hidden,) or b_hh.shape != (gates * hidden,):
        raise ShapeMismatchError(f"{op}: biases {b_ih.shape}/{b_hh.shape}")
    return hidden


def gru_step(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU cell update for a (batch, in) input and (batch, hidden) state.

    Gate layout follows the reset/update/new convention with weights stacked
    as (3*hidden, in) and (3*hidden, hidden).
    """
    x, h = as_tensor(x), as_tensor(h)
    w_ih, w_hh, b_ih, b_hh = map(as_tensor, (w_ih, w_hh, b_ih, b_hh))
    hidden = _check_rnn_shapes("gru_step", x, h, w_ih, w_hh, b_ih, b_hh, 3)

    gi = x.data @ w_ih.data.T + b_ih.data
    gh = h.data @ w_hh.data.T + b_hh.data
    i_r, i_z, i_n = gi[:, :hidden], gi[:, hidden:2 * hidden], gi[:, 2 * hidden:]
    h_r, h_z, h_n = gh[:, :hidden], gh[:, hidden:2 * hidden], gh[:, 2 * hidden:]
    with np.errstate(over="ignore"):
        r = 1.0 / (1.0 + np.exp(-(i_r + h_r)))
        z = 1.0 / (1.0 + np.exp(-(i_z + h_z)))
    n = np.tanh(i_n + r * h_n)
    out = _make((1.0 - z) * n + z * h.data, "gru_step", (x, h, w_ih, w_hh, b_ih, b_hh))
    if out.requires_grad:
        def _bw(g):
            dn = g * (1.0 - z)
            dz = g * (h.data - n)
            da_n = dn * (1.0 - n * n)
            dr = da_n * h_n
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            dgi = np.concatenate([da_r, da_z, da_n], axis=1)
            dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)
            if x.requires_grad:
                _accum(x, dgi @ w_ih.data)
            if h.requires_grad:
                _accum(h, dgh @ w_hh.data + g * z)
            if w_ih.requires_grad:
                _accum(w_ih, dgi.T @ x.data)
            if w_hh.requires_grad:
                _accum(w_hh, dgh.T @ h.data)
            if b_ih.requires_grad:
                _accum(b_ih, dgi.sum(axis=0))
            if b_hh.requires_grad:
                _accum(b_hh, dgh.sum(axis=0))
        out._backward = _bw
    return out


def lstm_step(
    x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; returns (new_h, new_c).

    Gates are stacked input/forget/cell/output as (4*hidden, ...).  The two
    outputs share the saved activations; new_c is a parent of new_h so the
    tape ordering routes the tanh(c) contribution correctly.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    w_ih, w_hh, b_ih, b_hh = map(as_tensor, (w_ih, w_hh, b_ih, b_hh))
    hidden = _check_rnn_shapes("lstm_step", x, h, w_ih, w_hh, b_ih, b_hh, 4)
    if c.shape != h.shape:
        raise ShapeMismatchError(f"lstm_step: cell {c.shape} vs hidden {h.shape}")

    gates = x.data @ w_ih.data.T + b_ih.data + h.data @ w_hh.data.T + b_hh.data
    a_i, a_f, a_g, a_o = (gates[:, k * hidden:(k + 1) * hidden] for k in range(4))
    with np.errstate(over="ignore"):
        gi = 1.0 / (1.0 + np.exp(-a_i))
        gf = 1.0 / (1.0 + np.exp(-a_f))
        go = 1.0 / (1.0 + np.exp(-a_o))
    gg = np.tanh(a_g)
    c_new = _make(gf * c.data + gi * gg, "lstm_step.c", (x, h, c, w_ih, w_hh, b_ih, b_hh))
    tc = np.tanh(c_new.data)
    h_new = _make(go * tc, "lstm_step.h", (c_new, x, h, w_ih, w_hh, b_ih, b_hh))

    def _scatter(d_gates_parts, offsets):
        dg = np.zeros_like(gates)
        for part, k in zip(d_gates_parts, offsets):
            dg[:, k * hidden:(k + 1) * hidden] = part
        if x.requires_grad:
            _accum(x, dg @ w_ih.data)
        if h.requires_grad:
            _accum(h, dg @ w_hh.data)
        if w_ih.requires_grad:
            _accum(w_ih, dg.T @ x.data)
        if w_hh.requires_grad:
            _accum(w_hh, dg.T @ h.data)
        if b_ih.requires_grad:
            _accum(b_ih, dg.sum(axis=0))
        if b_hh.requires_grad:
            _accum(b_hh, dg.sum(axis=0))

    if h_new.requires_grad:
        def _bw_h(g):
            da_o = g * tc * go * (1.0 - go)
            _accum(c_new, g * go * (1.0 - tc * tc))
            _scatter([da_o], [3])
        h_new._backward = _bw_h
    if c_new.requires_grad:
        def _bw_c(gc):
            if c.requires_grad:
                _accum(c, gc * gf)
            da_i = gc * gg * gi * (1.0 - gi)
            da_f = gc * c.data * gf * (1.0 - gf)
            da_g = gc * gi * (1.0 - gg * gg)
            _scatter([da_i, da_f, da_g], [0, 1, 2])
        c_new._backward = _bw_c
    return h_new, c_new
