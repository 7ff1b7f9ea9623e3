"""Parameter containers, the Adam optimizer, and the step learning-rate decay."""

from __future__ import annotations

import math
from collections.abc import Iterable

import numpy as np

from .autodiff import FrozenParameterError, Tensor


class ParameterSet:
    """Named map of trainable tensors with deterministic (lexicographic) order.

    When frozen, optimizer steps refuse to run, so frozen values are bit-exact
    for as long as the flag is set.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.frozen = False

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(name, self._params[name]) for name in self.names()]

    def tensors(self) -> list[Tensor]:
        return [self._params[name] for name in self.names()]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def freeze(self) -> None:
        """Lock values and drop the tensors out of future tapes."""
        self.frozen = True
        for t in self._params.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        for t in self._params.values():
            t.requires_grad = True
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.items():
            if name not in arrays:
                raise KeyError(f"missing parameter in state: {name}")
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {t.data.shape}")
            t.data[...] = src

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}


class Adam:
    """Standard Adam with bias correction over one or more ParameterSets."""

    def __init__(
        self,
        params: ParameterSet | Iterable[ParameterSet],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.param_sets = [params] if isinstance(params, ParameterSet) else list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[tuple[int, str], np.ndarray] = {}
        self._v: dict[tuple[int, str], np.ndarray] = {}

    def step(self) -> None:
        for ps in self.param_sets:
            if ps.frozen:
                raise FrozenParameterError("Adam.step: parameter set is frozen")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for si, ps in enumerate(self.param_sets):
            for name, p in ps.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                key = (si, name)
                m = self._m.setdefault(key, np.zeros_like(p.data))
                v = self._v.setdefault(key, np.zeros_like(p.data))
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for ps in self.param_sets:
            ps.zero_grad()


def step_lr(epoch: int, base_lr: float, step_size: int, gamma: float) -> float:
    """Learning rate after `epoch` epochs of step decay."""
    if step_size < 1:
        raise ValueError(f"step_lr: step_size must be >= 1, got {step_size}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"step_lr: gamma must be in (0, 1], got {gamma}")
    return base_lr * gamma ** math.floor(epoch / step_size)
