"""Central finite-difference checks of tape gradients.

Checks run in float64: with float32 storage the truncation error of a
h=1e-3 central difference is swamped by rounding.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, precision


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    wrt: Sequence[int] | None = None,
) -> list[float]:
    """Relative error between tape and finite-difference gradients, per input.

    ``fn`` receives one Tensor per entry of ``inputs`` and returns a scalar.
    With ``max_coords`` only that many randomly chosen coordinates of each
    checked input are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    with precision(np.float64):
        base = [np.array(x, dtype=np.float64) for x in inputs]
        leaves = [Tensor(x, requires_grad=(i in wrt)) for i, x in enumerate(base)]
        with Tape() as tape:
            out = fn(*leaves)
        tape.backward(out)

        def f(arrs):
            return float(fn(*[Tensor(a) for a in arrs]).data)

        errors = []
        for i in wrt:
            analytic = leaves[i].grad
            if analytic is None:
                analytic = np.zeros_like(base[i])
            flat_idx = np.arange(base[i].size)
            if max_coords is not None and base[i].size > max_coords:
                flat_idx = rng.choice(base[i].size, size=max_coords, replace=False)
            numeric = np.empty(len(flat_idx))
            for j, k in enumerate(flat_idx):
                plus = [a.copy() for a in base]
                minus = [a.copy() for a in base]
                plus[i].reshape(-1)[k] += h
                minus[i].reshape(-1)[k] -= h
                numeric[j] = (f(plus) - f(minus)) / (2 * h)
            errors.append(relative_error(analytic.reshape(-1)[flat_idx], numeric))
        return errors
