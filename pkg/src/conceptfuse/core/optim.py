"""Optimizers operating on Tensor leaves in place of their ``data`` arrays."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, check_finite


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> tuple[float, float]:
    """Rescale grads so their global L2 norm is at most ``max_norm``.

    Returns (norm before clipping, norm after clipping).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
        return norm, global_grad_norm(params)
    return norm, norm


def _assign(p: Tensor, value: np.ndarray) -> None:
    check_finite(value, f"update of {p.name or 'parameter'}")
    value = np.ascontiguousarray(value.astype(p.data.dtype, copy=False))
    value.flags.writeable = False
    p.data = value


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                _assign(p, p.data - self.lr * p.grad)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            step = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            _assign(p, p.data - step)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
