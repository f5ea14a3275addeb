"""Ways of merging text tokens with aligned image tokens into one conditioning sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, ops
from .encoders import TokenSeq

STRATEGIES = ("naive", "concat", "xattn")


@dataclass
class FusionConfig:
    strategy: str = "concat"
    alpha: float = 0.3
    rescale: bool = True

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        _check_alpha(self.alpha)


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def _tokens(x) -> Tensor:
    return x.tokens if isinstance(x, TokenSeq) else ops.as_tensor(x)


def _check_widths(T: Tensor, I: Tensor) -> None:
    if T.shape[-1] != I.shape[-1]:
        raise ValueError(f"width mismatch: text {T.shape[-1]} vs image {I.shape[-1]}")
    if I.shape[-2] < 1:
        raise ValueError("need at least one aligned image token")


def _blend(T: Tensor, other: Tensor, alpha: float) -> Tensor:
    if alpha == 0.0:
        return T  # exact identity, no floating-point round trip
    return ops.add(ops.scale(T, 1.0 - alpha), ops.scale(other, alpha))


def frobenius(x: Tensor, floor: float = 0.0) -> Tensor:
    """Per-sequence Frobenius norm over the last two axes, kept as (..., 1, 1)."""
    sq = ops.sum(ops.mul(x, x), axis=(-2, -1), keepdims=True)
    return ops.sqrt(ops.clip(sq, floor * floor, np.inf)) if floor > 0 else ops.sqrt(sq)


def naive_tokens(T: Tensor, I: Tensor, alpha: float) -> Tensor:
    _check_widths(T, I)
    _check_alpha(alpha)
    if alpha == 0.0:
        return T
    glob = ops.mean(I, axis=-2, keepdims=True)
    return _blend(T, glob, alpha)


def concat_tokens(T: Tensor, I: Tensor) -> Tensor:
    _check_widths(T, I)
    return ops.concat([T, I], axis=-2)


def xattn_tokens(T: Tensor, I: Tensor, alpha: float, rescale: bool = True) -> Tensor:
    _check_widths(T, I)
    _check_alpha(alpha)
    if alpha == 0.0:
        return T
    fused = ops.sdp_attention(T, I, I)
    if rescale:
        # global Frobenius ratio, recomputed from the current tokens on every call
        fused = ops.mul(fused, ops.div(frobenius(T), frobenius(fused, floor=1e-8)))
    return _blend(T, fused, alpha)


def _fused(tokens: Tensor, strategy: str, alpha: float | None, **extra) -> TokenSeq:
    meta = {"strategy": strategy, "alpha": alpha, **extra}
    return TokenSeq(tokens, "fused", meta)


def fuse_naive(T, I_hat, alpha: float = 0.3) -> TokenSeq:
    """Blend every text token with the mean aligned image token."""
    return _fused(naive_tokens(_tokens(T), _tokens(I_hat), alpha), "naive", alpha)


def fuse_concat(T, I_hat) -> TokenSeq:
    """[T; I_hat]: text rows first, aligned image rows appended unchanged."""
    T, I = _tokens(T), _tokens(I_hat)
    return _fused(concat_tokens(T, I), "concat", None, text_rows=T.shape[-2])


def fuse_xattn(T, I_hat, alpha: float = 0.3, rescale: bool = True) -> TokenSeq:
    """Text queries attend over aligned image tokens; the result is blended back into T."""
    return _fused(xattn_tokens(_tokens(T), _tokens(I_hat), alpha, rescale), "xattn", alpha, rescale=rescale)


def fuse(T, I_hat, config: FusionConfig) -> TokenSeq:
    config.validate()
    if config.strategy == "naive":
        return fuse_naive(T, I_hat, config.alpha)
    if config.strategy == "concat":
        return fuse_concat(T, I_hat)
    return fuse_xattn(T, I_hat, config.alpha, config.rescale)


def fuse_tokens(T: Tensor, I: Tensor, config: FusionConfig) -> Tensor:
    """Tensor-level fusion (works on batched (B, n, d) inputs)."""
    config.validate()
    if config.strategy == "naive":
        return naive_tokens(T, I, config.alpha)
    if config.strategy == "concat":
        return concat_tokens(T, I)
    return xattn_tokens(T, I, config.alpha, config.rescale)
