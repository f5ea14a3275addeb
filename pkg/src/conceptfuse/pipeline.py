"""Workspace layout and the stages that read and write it.

A workspace directory holds::

    data/                dataset files
    encoders/            frozen dual encoder (+ trace.jsonl)
    denoiser/            frozen diffusion backbone (+ trace.jsonl)
    aligner/             default aligner; aligner-infonce/, aligner-attn/ for ablations
    runs/<name>/         generated P6 images, latents.vtf, manifest.jsonl
    reports/<name>.jsonl metric reports
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .aligner import Aligner, train_aligner
from .config import RunConfig
from .core import Tensor, no_grad, vtf
from .dataset import Dataset, generate_dataset, load_dataset, sample_caption, save_dataset
from .diffusion import Denoiser, ddim_sample, decode_latent, train_denoiser
from .encoders import DualEncoder, pretrain_contrastive
from .fusion import FusionConfig, fuse_tokens
from .images import read_ppm, write_ppm
from .metrics import MetricReport, evaluate_run
from .pno import pno_optimize

log = logging.getLogger(__name__)

MODES = ("text", "naive", "concat", "xattn")


class MissingArtifact(FileNotFoundError):
    pass


class MixedConfigError(ValueError):
    pass


def _dump_jsonl(path, rows) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def aligner_dir_name(loss: str) -> str:
    return "aligner" if loss == "both" else f"aligner-{loss}"


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def encoders(self) -> Path:
        return self.root / "encoders"

    @property
    def denoiser(self) -> Path:
        return self.root / "denoiser"

    def aligner(self, loss: str = "both") -> Path:
        return self.root / aligner_dir_name(loss)

    def run(self, name: str) -> Path:
        return self.root / "runs" / name

    def report(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.jsonl"

    def require(self, path: Path, what: str, hint: str) -> Path:
        if not (path / "manifest.json").exists():
            raise MissingArtifact(f"missing {what} at {path}; run `{hint}` first")
        return path

    def load_dataset(self) -> Dataset:
        self.require(self.data, "dataset", "conceptfuse gen-data")
        return load_dataset(self.data)

    def load_encoder(self) -> DualEncoder:
        return DualEncoder.load(self.require(self.encoders, "encoders", "conceptfuse train encoders"))

    def load_denoiser(self) -> Denoiser:
        return Denoiser.load(self.require(self.denoiser, "denoiser", "conceptfuse train denoiser"))

    def load_aligner(self, loss: str = "both") -> Aligner:
        hint = "conceptfuse train aligner" + ("" if loss == "both" else f" --loss {loss}")
        return Aligner.load(self.require(self.aligner(loss), "aligner", hint))


# ---------------------------------------------------------------- stages

def stage_gen_data(ws: Workspace, seed: int, size: int, workers: int = 1) -> Dataset:
    ds = generate_dataset(seed, size, workers)
    save_dataset(ds, ws.data)
    return ds


def stage_train_encoders(ws: Workspace, cfg: RunConfig) -> list[dict]:
    ds = ws.load_dataset()
    enc, trace = pretrain_contrastive(ds, cfg.encoder_config())
    enc.save(ws.encoders, {"dataset": ds.digest(), "config_hash": cfg.hash()})
    _dump_jsonl(ws.encoders / "trace.jsonl", trace)
    return trace


def stage_train_denoiser(ws: Workspace, cfg: RunConfig) -> list[dict]:
    ds = ws.load_dataset()
    enc = ws.load_encoder()
    model, trace = train_denoiser(ds, enc, cfg.diffusion_config())
    model.save(ws.denoiser, {"dataset": ds.digest(), "config_hash": cfg.hash()})
    _dump_jsonl(ws.denoiser / "trace.jsonl", trace)
    return trace


def stage_train_aligner(ws: Workspace, cfg: RunConfig, loss: str = "both") -> list[dict]:
    ds = ws.load_dataset()
    enc = ws.load_encoder()
    aligner, trace = train_aligner(ds, enc, cfg.align_config(loss))
    out = ws.aligner(loss)
    aligner.save(out, {"config_hash": cfg.hash()})
    _dump_jsonl(out / "trace.jsonl", trace)
    return trace


# ---------------------------------------------------------------- generation

@dataclass
class Components:
    encoder: DualEncoder
    denoiser: Denoiser
    aligner: Aligner | None

    @classmethod
    def load(cls, ws: Workspace, aligner_loss: str | None = "both") -> "Components":
        aligner = ws.load_aligner(aligner_loss) if aligner_loss else None
        return cls(ws.load_encoder(), ws.load_denoiser(), aligner)


@dataclass
class Pair:
    id: str
    prompt: str
    prompt_index: int
    reference_index: int


def evaluation_pairs(ds: Dataset, n: int, seed: int) -> list[Pair]:
    """Test-split (prompt, reference) pairs where the reference is always a different sample."""
    test = ds.split.test
    if n > len(test):
        raise ValueError(f"asked for {n} pairs but the test split has only {len(test)} samples")
    perm = np.random.default_rng([seed, 0xBA1]).permutation(len(test))
    shift = max(len(test) // 2, 1)
    pairs = []
    for k in range(n):
        p = ds.samples[test[perm[k]]]
        r = test[perm[(k + shift) % len(test)]]
        pairs.append(Pair(f"{k:04d}", sample_caption(p, seed * 7919 + k), p.index, r))
    return pairs


def initial_noise(seed: int, item: int, width: int) -> np.ndarray:
    return np.random.default_rng([seed, item, 0x7]).standard_normal(width).astype(np.float32)


def conditioning(comp: Components, prompts: Sequence[str], references: np.ndarray | None,
                 mode: str, fusion_cfg) -> Tensor:
    """Batched conditioning tokens (B, k, d) for one generation mode."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    enc = comp.encoder
    ids = np.stack([enc.tokenize(p) for p in prompts])
    with no_grad():
        T = enc.text_tokens(ids)
        if mode == "text":
            return T
        if references is None:
            raise ValueError(f"mode {mode!r} needs a reference image")
        if comp.aligner is None:
            raise ValueError("fusion modes need a trained aligner")
        I_hat = comp.aligner.align_tokens(enc.image_tokens(Tensor(np.asarray(references, np.float32))))
        return fuse_tokens(T, I_hat, FusionConfig(mode, fusion_cfg.alpha, fusion_cfg.rescale))


def sample_images(model: Denoiser, x_T: np.ndarray, cond: Tensor, steps: int) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        x0 = ddim_sample(model, Tensor(x_T), cond, steps)
        return x0.data.copy(), decode_latent(model, x0).data.copy()


def generate_run(ws: Workspace, comp: Components, ds: Dataset, pairs: Sequence[Pair], mode: str,
                 cfg: RunConfig, name: str, pno: bool = False, aligner_label: str = "both") -> Path:
    """Generate every pair under every evaluation seed and persist images + manifest."""
    out = ws.run(name)
    out.mkdir(parents=True, exist_ok=True)
    prompts = [p.prompt for p in pairs]
    refs = np.stack([ds.samples[p.reference_index].image for p in pairs])
    fcfg = cfg.fusion_config()
    cond = conditioning(comp, prompts, refs, mode, fcfg)
    L = comp.denoiser.config.latent_dim
    rows, latents = [], []
    for seed in cfg.eval_seeds:
        x_T = np.stack([initial_noise(seed, int(p.id), L) for p in pairs])
        if pno:
            x0s, imgs, extra = _pno_batch(comp, x_T, cond, refs, cfg)
        else:
            x0s, imgs = sample_images(comp.denoiser, x_T, cond, cfg.ddim_steps)
            extra = [{} for _ in pairs]
        for p, x0, img, ex in zip(pairs, x0s, imgs, extra):
            sid = f"{p.id}-s{seed}"
            write_ppm(out / f"{sid}.ppm", img)
            latents.append(x0)
            rows.append({"id": sid, "prompt": p.prompt, "prompt_index": p.prompt_index,
                         "reference_index": p.reference_index, "seed": seed, "mode": mode,
                         "strategy": None if mode == "text" else mode,
                         "alpha": None if mode in ("text", "concat") else cfg.alpha,
                         "aligner": None if mode == "text" else aligner_label,
                         "pno": pno, "config_hash": cfg.hash(), "image": f"{sid}.ppm", **ex})
    vtf.save(out / "latents.vtf", np.stack(latents))
    _dump_jsonl(out / "manifest.jsonl", rows)
    return out


def _pno_batch(comp: Components, x_T: np.ndarray, cond: Tensor, refs: np.ndarray, cfg: RunConfig):
    x0s, imgs, extra = [], [], []
    for k in range(len(x_T)):
        state = pno_optimize(comp.denoiser, comp.encoder, x_T[k], Tensor(cond.data[k]), refs[k], cfg.pno)
        x0s.append(state.x_0)
        imgs.append(state.image)
        extra.append({"pno_cos_before": state.cos_before, "pno_cos_after": state.cos_after,
                      "pno_max_clipped_norm": max(r["clipped_norm"] for r in state.trace)})
    return np.stack(x0s), np.stack(imgs), extra


# ---------------------------------------------------------------- evaluation

def load_run(run_dir) -> list[dict]:
    path = Path(run_dir) / "manifest.jsonl"
    if not path.exists():
        raise MissingArtifact(f"no generated run in {run_dir} (manifest.jsonl missing)")
    rows = _read_jsonl(path)
    if not rows:
        raise MissingArtifact(f"run {run_dir} is empty")
    return rows


def evaluate_dirs(run_dirs: Sequence, enc: DualEncoder, ds: Dataset, force: bool = False) -> list[MetricReport]:
    runs = [(Path(d), load_run(d)) for d in run_dirs]
    hashes = sorted({r["config_hash"] for _, rows in runs for r in rows})
    if len(hashes) > 1 and not force:
        raise MixedConfigError(f"runs were produced by different configs ({', '.join(hashes)}); "
                               "pass --force to evaluate anyway")
    reports = []
    for d, rows in runs:
        images = [read_ppm(d / r["image"]) for r in rows]
        refs = [ds.samples[r["reference_index"]].image for r in rows]
        reports.append(evaluate_run(enc, images, [r["prompt"] for r in rows], refs,
                                    method=d.name, config_hash=",".join(sorted({r["config_hash"] for r in rows})),
                                    ids=[r["id"] for r in rows]))
    return reports


def sign_test(wins: int, n: int) -> float:
    """One-sided exact binomial p-value for ``wins`` successes out of ``n`` (ties dropped)."""
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def compare(a: MetricReport, b: MetricReport, metric: str, lower_is_better: bool) -> dict:
    """Does ``a`` beat ``b`` on ``metric``, both on the mean and by a paired sign test?"""
    va = np.array([getattr(s, metric) for s in a.samples])
    vb = np.array([getattr(s, metric) for s in b.samples])
    if len(va) != len(vb):
        raise ValueError("paired comparison needs equally sized reports")
    diff = vb - va if lower_is_better else va - vb
    wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
    p = sign_test(wins, wins + losses)
    mean_ok = bool(diff.mean() > 0)
    return {"kind": "comparison", "metric": metric, "better": a.method, "than": b.method,
            "mean_a": float(va.mean()), "mean_b": float(vb.mean()), "wins": wins, "losses": losses,
            "p_value": p, "holds": bool(mean_ok and p < 0.05)}


def write_reports(path, reports: Sequence[MetricReport], extra: Sequence[dict] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [line for r in reports for line in r.lines()]
    lines += [json.dumps(e) for e in extra]
    path.write_text("\n".join(lines) + "\n")


def pno_summary(ws: Workspace, name: str) -> dict:
    rows = load_run(ws.run(name))
    before = np.array([r["pno_cos_before"] for r in rows])
    after = np.array([r["pno_cos_after"] for r in rows])
    return {"kind": "pno", "run": name, "n": len(rows), "improved_fraction": float((after > before).mean()),
            "mean_improvement": float((after - before).mean()),
            "max_clipped_norm": float(max(r["pno_max_clipped_norm"] for r in rows))}
