"""CLIP-style text alignment and LPIPS-style perceptual distance on the toy encoder."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Tensor, no_grad
from .encoders import DualEncoder


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroDivisionError("zero-norm embedding")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def raw_image_embedding(enc: DualEncoder, image: np.ndarray) -> np.ndarray:
    """Projected (not yet normalized) image embedding."""
    with no_grad():
        toks = enc.image_tokens(Tensor(image))
        return (toks.data.mean(axis=-2) @ enc.params["image.proj"].data).astype(np.float64)


def raw_text_embedding(enc: DualEncoder, caption: str) -> np.ndarray:
    with no_grad():
        toks = enc.text_tokens(enc.tokenize(caption))
        return (toks.data.mean(axis=-2) @ enc.params["text.proj"].data).astype(np.float64)


def clip_score(enc: DualEncoder, image: np.ndarray, caption: str) -> float:
    """Cosine similarity of projected image and caption embeddings."""
    return _cosine(raw_image_embedding(enc, image), raw_text_embedding(enc, caption))


def clip_image_similarity(enc: DualEncoder, a: np.ndarray, b: np.ndarray) -> float:
    return _cosine(raw_image_embedding(enc, a), raw_image_embedding(enc, b))


def lpips(enc: DualEncoder, x_ref: np.ndarray, x_hat: np.ndarray) -> float:
    """Sum over the encoder's three feature stages of squared feature distance (unit weights)."""
    x_ref = np.asarray(x_ref, dtype=np.float32)
    x_hat = np.asarray(x_hat, dtype=np.float32)
    if x_ref.shape != x_hat.shape:
        raise ValueError(f"resolution mismatch {x_ref.shape} vs {x_hat.shape}")
    with no_grad():
        fa = enc.image_stages(Tensor(x_ref))
        fb = enc.image_stages(Tensor(x_hat))
    total = 0.0
    for a, b in zip(fa, fb):
        d = a.data.astype(np.float64).ravel() - b.data.astype(np.float64).ravel()
        total += float(d @ d)
    return total


@dataclass
class SampleMetrics:
    id: str
    prompt: str
    clip_score: float
    lpips: float


@dataclass
class MetricReport:
    method: str
    config_hash: str
    samples: list[SampleMetrics] = field(default_factory=list)

    @property
    def clip_score(self) -> float:
        return float(np.mean([s.clip_score for s in self.samples]))

    @property
    def lpips(self) -> float:
        return float(np.mean([s.lpips for s in self.samples]))

    def lines(self) -> list[str]:
        out = []
        for s in self.samples:
            out.append(json.dumps({"kind": "sample", "method": self.method, "id": s.id, "prompt": s.prompt,
                                   "clip_score": s.clip_score, "lpips": s.lpips}))
        out.append(json.dumps({"kind": "aggregate", "method": self.method, "config_hash": self.config_hash,
                               "n": len(self.samples), "clip_score": self.clip_score, "lpips": self.lpips}))
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def evaluate_run(enc: DualEncoder, images: Sequence[np.ndarray], prompts: Sequence[str],
                 references: Sequence[np.ndarray | None], method: str = "run", config_hash: str = "",
                 ids: Sequence[str] | None = None) -> MetricReport:
    """Per-sample CLIP score against the prompt and LPIPS against the reference."""
    if not (len(images) == len(prompts) == len(references)):
        raise ValueError(f"cardinality mismatch: {len(images)} images, {len(prompts)} prompts, "
                         f"{len(references)} references")
    if len(images) == 0:
        raise ValueError("nothing to evaluate")
    ids = list(ids) if ids is not None else [f"{i:04d}" for i in range(len(images))]
    report = MetricReport(method, config_hash)
    for sid, img, prompt, ref in zip(ids, images, prompts, references):
        lp = lpips(enc, ref, img) if ref is not None else float("nan")
        report.samples.append(SampleMetrics(sid, prompt, clip_score(enc, img, prompt), lp))
    return report
