"""Test-time refinement of the conditioning sequence and initial noise.

Both the fused conditioning tokens and x_T are moved by clipped gradient
descent so that the generated image's embedding points towards the
reference image's embedding, while a moment penalty keeps x_T close to a
standard normal sample.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import NonFiniteError, Tape, Tensor, clip_grad_norm, no_grad, ops, save_params
from .core.params import ParamSet
from .diffusion import Denoiser, ddim_sample, decode_latent
from .encoders import DualEncoder, TokenSeq

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class PnoConfig:
    steps: int = 50
    lr: float = 1e-2
    lambda_reg: float = 0.1
    grad_clip: float = 1.0
    unroll_steps: int = 5
    final_steps: int = 50

    def validate(self) -> None:
        if not 1 <= self.steps <= 50:
            raise ValueError(f"PNO steps must lie in [1, 50], got {self.steps}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        if self.unroll_steps < 1:
            raise ValueError("unroll_steps must be >= 1")


@dataclass
class PnoState:
    x_T: np.ndarray
    T_final: TokenSeq
    guide_embedding: np.ndarray
    trace: list[dict] = field(default_factory=list)
    x_0: np.ndarray | None = None
    image: np.ndarray | None = None
    cos_before: float | None = None
    cos_after: float | None = None

    def save(self, directory) -> None:
        d = Path(directory)
        params = ParamSet({"x_T": Tensor(self.x_T), "T_final": self.T_final.tokens})
        save_params(d, params, {"kind": "pno", "cos_before": self.cos_before, "cos_after": self.cos_after})
        write_trace(self.trace, d / "trace.jsonl")


def write_trace(trace: list[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(row) + "\n" for row in trace))


def loss_reg(x_T: Tensor) -> Tensor:
    """mean(x)^2 + (var(x) - 1)^2 over all entries (population variance)."""
    mu = ops.mean(x_T)
    centered = ops.sub(x_T, mu)
    var = ops.mean(ops.mul(centered, centered))
    dv = ops.add_scalar(var, -1.0)
    return ops.add(ops.mul(mu, mu), ops.mul(dv, dv))


def generated_embedding(model: Denoiser, enc: DualEncoder, x_T: Tensor, cond: Tensor, steps: int) -> Tensor:
    """Unit-norm image embedding of the image generated from (x_T, cond)."""
    image = decode_latent(model, ddim_sample(model, x_T, cond, steps))
    return enc.project_tokens(enc.image_tokens(image), "image")


def loss_pno(model: Denoiser, enc: DualEncoder, x_T: Tensor, T_final, guide_embedding,
             lambda_reg: float, unroll_steps: int = 5) -> tuple[Tensor, dict]:
    """lambda_reg * reg(x_T) - cos(embed(generate(x_T, T_final)), guide)."""
    guide = np.asarray(guide_embedding, dtype=np.float64)
    if abs(np.linalg.norm(guide) - 1.0) > 1e-4:
        raise ValueError("guide embedding must have unit norm")
    cond = getattr(T_final, "tokens", T_final)
    z = generated_embedding(model, enc, x_T, cond, unroll_steps)
    cos = ops.sum(ops.mul(z, Tensor(guide.astype(z.dtype))))
    reg = loss_reg(x_T)
    loss = ops.sub(ops.scale(reg, lambda_reg), cos)
    if not np.isfinite(loss.item()):
        raise NonFiniteError("PNO loss is not finite")
    return loss, {"cos": cos.item(), "reg": reg.item()}


def guide_embedding(enc: DualEncoder, guide_image: np.ndarray) -> np.ndarray:
    return enc.embed_images(np.asarray(guide_image, dtype=np.float32)[None])[0].astype(np.float64)


def full_cosine(model: Denoiser, enc: DualEncoder, x_T, cond, guide: np.ndarray, steps: int = 50):
    with no_grad():
        x0 = ddim_sample(model, Tensor(x_T), cond, steps)
        image = decode_latent(model, x0).data
        z = enc.embed_images(image[None])[0]
    return float(z @ guide), x0.data, image


def _diverged(loss: float, initial: float) -> bool:
    return loss > initial and abs(loss) > 10.0 * max(abs(initial), 1e-8)


def pno_optimize(model: Denoiser, enc: DualEncoder, x_T, T_final, guide_image,
                 config: PnoConfig | None = None) -> PnoState:
    """Clipped gradient descent on (x_T, T_final); the final image uses the full sampler."""
    config = config or PnoConfig()
    config.validate()
    guide = guide_embedding(enc, guide_image)
    meta = dict(getattr(T_final, "meta", {}))
    x = Tensor(np.asarray(getattr(x_T, "data", x_T)), requires_grad=True, name="x_T")
    tok = Tensor(getattr(T_final, "tokens", T_final).data, requires_grad=True, name="T_final")
    cos_before, _, _ = full_cosine(model, enc, x.data, tok, guide, config.final_steps)
    trace: list[dict] = []
    initial = None
    for step in range(config.steps):
        x.grad = tok.grad = None
        with Tape() as tape:
            loss, terms = loss_pno(model, enc, x, tok, guide, config.lambda_reg, config.unroll_steps)
        tape.backward(loss)
        norm, clipped = clip_grad_norm([x, tok], config.grad_clip)
        value = loss.item()
        initial = value if initial is None else initial
        trace.append({"step": step, "loss": value, **terms, "grad_norm": norm, "clipped_norm": clipped})
        if _diverged(value, initial):
            raise DivergenceError(f"PNO diverged at step {step}: loss {value:.4g} vs initial {initial:.4g}", trace)
        x = Tensor(x.data - config.lr * x.grad, requires_grad=True, name="x_T")
        tok = Tensor(tok.data - config.lr * tok.grad, requires_grad=True, name="T_final")
    cos_after, x0, image = full_cosine(model, enc, x.data, tok, guide, config.final_steps)
    log.info("PNO cos %.4f -> %.4f", cos_before, cos_after)
    final = TokenSeq(Tensor(tok.data), "fused", {**meta, "pno": True})
    return PnoState(x.data.copy(), final, guide, trace, x0, image, cos_before, cos_after)
