"""Toy conditional latent diffusion backbone with a deterministic DDIM sampler.

Latents are 64-d: a fixed orthonormal low-frequency DCT basis (32 luma and
2x16 chroma coefficients) followed by a seeded random rotation and a
per-dimension standardization. The denoiser is a small residual MLP whose
blocks cross-attend from the latent state to the conditioning tokens, so it
accepts any number of conditioning rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.fft import dct

from .core import Adam, ParamSet, Tape, Tensor, load_params, no_grad, ops, save_params
from .core.params import linear_init, normal_init
from .dataset import RESOLUTION, Dataset, caption_index

log = logging.getLogger(__name__)


@dataclass
class DiffusionConfig:
    latent_dim: int = 64
    hidden: int = 128
    attn_dim: int = 64
    cond_dim: int = 64
    num_blocks: int = 2
    T_steps: int = 50
    min_alpha_bar: float = 0.005
    seed: int = 0
    epochs: int = 120
    lr: float = 2e-3
    batch_size: int = 64
    codec_seed: int = 7


# ---------------------------------------------------------------- schedule

class DdimSchedule:
    """Floored cosine schedule over ``T_steps`` discrete steps; eta is always 0."""

    eta = 0.0

    def __init__(self, T_steps: int = 50, min_alpha_bar: float = 0.005, s: float = 0.008):
        self.T_steps = T_steps
        t = np.arange(T_steps + 1) / T_steps
        f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        f = np.clip(f / f[0], 0.0, 1.0)
        self.alpha_bar = (min_alpha_bar + (1 - min_alpha_bar) * f).astype(np.float64)
        self.alpha_bar[0] = 1.0

    def timesteps(self, steps: int) -> list[int]:
        """Descending timestep sequence T = t_0 > ... > t_steps = 0."""
        if steps < 1 or steps > self.T_steps:
            raise ValueError(f"steps must lie in [1, {self.T_steps}]")
        seq = np.round(np.linspace(self.T_steps, 0, steps + 1)).astype(int)
        return seq.tolist()


# ---------------------------------------------------------------- latent codec

def _dct_basis(n_luma: int = 32, n_chroma: int = 16, res: int = RESOLUTION) -> np.ndarray:
    C = dct(np.eye(res), norm="ortho", axis=0)
    color = np.array([[1, 1, 1], [1, -1, 0], [1, 1, -2]], dtype=np.float64)
    color /= np.linalg.norm(color, axis=1, keepdims=True)
    order = sorted(((u, v) for u in range(res) for v in range(res)), key=lambda p: (p[0] + p[1], p[0]))
    rows = []
    for ch, n in ((0, n_luma), (1, n_chroma), (2, n_chroma)):
        for u, v in order[:n]:
            rows.append((np.outer(C[u], C[v])[:, :, None] * color[ch]).ravel())
    return np.array(rows)


class LatentCodec:
    """Fixed linear image <-> latent maps (no training beyond two statistics)."""

    def __init__(self, seed: int = 7, shift: np.ndarray | None = None, scale: float = 1.0):
        basis = _dct_basis()
        q, r = np.linalg.qr(np.random.default_rng([seed, 0xC0DEC]).standard_normal((64, 64)))
        rot = q * np.sign(np.diag(r))
        self.seed = seed
        self.enc = rot @ basis  # (64, 3072), orthonormal rows
        self.shift = np.zeros(64) if shift is None else np.asarray(shift, dtype=np.float64)
        self.scale = float(scale)
        self._dec = Tensor(self.enc * self.scale)
        self._dec_bias = Tensor(self.shift @ self.enc + 0.5)

    @classmethod
    def fit(cls, images: np.ndarray, seed: int = 7) -> "LatentCodec":
        raw = (images.reshape(len(images), -1).astype(np.float64) - 0.5) @ cls(seed).enc.T
        # rounded to what the checkpoint stores, so a reloaded codec is bit-identical
        shift = raw.mean(axis=0).astype(np.float32).astype(np.float64)
        return cls(seed, shift, float(np.float32(raw.std())))

    def encode(self, images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(*np.shape(images)[:-3], -1)
        return (((flat - 0.5) @ self.enc.T - self.shift) / self.scale).astype(np.float32)

    def decode(self, z: Tensor) -> Tensor:
        """Latent(s) (..., 64) -> images (..., 32, 32, 3) clamped to [0, 1]."""
        flat = ops.add(ops.matmul(_rows(z), self._dec), self._dec_bias)
        lead = z.shape[:-1]
        return ops.clip(ops.reshape(flat, (*lead, RESOLUTION, RESOLUTION, 3)), 0.0, 1.0)


def _rows(z: Tensor) -> Tensor:
    return z if z.ndim >= 2 else ops.reshape(z, (1, z.shape[0]))


# ---------------------------------------------------------------- denoiser

def init_denoiser_params(cfg: DiffusionConfig) -> ParamSet:
    rng = np.random.default_rng([cfg.seed, 0xD1F])
    H, A = cfg.hidden, cfg.attn_dim
    raw = {
        "in.w": linear_init(rng, cfg.latent_dim, H),
        "in.b": np.zeros(H, np.float32),
        "temb": normal_init(rng, (cfg.T_steps + 1, H), 0.5),
    }
    for j in range(cfg.num_blocks):
        raw.update({
            f"b{j}.ln.g": np.ones(H, np.float32),
            f"b{j}.ln.b": np.zeros(H, np.float32),
            f"b{j}.w1": linear_init(rng, H, H),
            f"b{j}.b1": np.zeros(H, np.float32),
            f"b{j}.q": linear_init(rng, H, A),
            f"b{j}.k": linear_init(rng, cfg.cond_dim, A),
            f"b{j}.v": linear_init(rng, cfg.cond_dim, A),
            f"b{j}.w2": linear_init(rng, H, H, 0.5),
            f"b{j}.wo": linear_init(rng, A, H, 0.5),
            f"b{j}.b2": np.zeros(H, np.float32),
        })
    raw.update({
        "out.ln.g": np.ones(H, np.float32),
        "out.ln.b": np.zeros(H, np.float32),
        "out.w": linear_init(rng, H, cfg.latent_dim, 0.5),
        "out.b": np.zeros(cfg.latent_dim, np.float32),
    })
    return ParamSet({k: Tensor(v, name=k) for k, v in raw.items()})


class Denoiser:
    """epsilon-prediction network eps(x_t, t, cond)."""

    def __init__(self, params: ParamSet, config: DiffusionConfig, codec: LatentCodec):
        self.params = params
        self.config = config
        self.codec = codec
        self.schedule = DdimSchedule(config.T_steps, config.min_alpha_bar)

    @classmethod
    def initialize(cls, config: DiffusionConfig | None = None, codec: LatentCodec | None = None) -> "Denoiser":
        config = config or DiffusionConfig()
        return cls(init_denoiser_params(config), config, codec or LatentCodec(config.codec_seed))

    def predict_eps(self, x: Tensor, t, cond: Tensor) -> Tensor:
        """x: (B, L) or (L,); t: int or (B,) ints; cond: (B, k, d) or (k, d)."""
        single = x.ndim == 1
        if single:
            x = ops.reshape(x, (1, x.shape[0]))
            cond = ops.reshape(cond, (1, *cond.shape))
        if cond.shape[-1] != self.config.cond_dim:
            raise ValueError(f"conditioning width {cond.shape[-1]} != {self.config.cond_dim}")
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        p = self.params
        h = ops.add(ops.linear(x, p["in.w"], p["in.b"]), ops.embedding(p["temb"], t))
        for j in range(self.config.num_blocks):
            u = ops.layer_norm(h, p[f"b{j}.ln.g"], p[f"b{j}.ln.b"])
            u = ops.silu(ops.linear(u, p[f"b{j}.w1"], p[f"b{j}.b1"]))
            q = ops.reshape(ops.matmul(u, p[f"b{j}.q"]), (B, 1, self.config.attn_dim))
            o = ops.sdp_attention(q, ops.matmul(cond, p[f"b{j}.k"]), ops.matmul(cond, p[f"b{j}.v"]))
            o = ops.reshape(o, (B, self.config.attn_dim))
            upd = ops.add(ops.add(ops.matmul(u, p[f"b{j}.w2"]), ops.matmul(o, p[f"b{j}.wo"])), p[f"b{j}.b2"])
            h = ops.add(h, upd)
        h = ops.layer_norm(h, p["out.ln.g"], p["out.ln.b"])
        eps = ops.linear(h, p["out.w"], p["out.b"])
        return ops.reshape(eps, (self.config.latent_dim,)) if single else eps

    def save(self, directory, extra: dict | None = None) -> None:
        params = ParamSet(self.params)
        params["codec.shift"] = Tensor(self.codec.shift)
        params["codec.scale"] = Tensor(np.array([self.codec.scale]))
        manifest = {"kind": "denoiser", "config": asdict(self.config)}
        manifest.update(extra or {})
        save_params(directory, params, manifest)

    @classmethod
    def load(cls, directory) -> "Denoiser":
        params, manifest = load_params(directory)
        config = DiffusionConfig(**manifest["config"])
        shift = params.pop("codec.shift").data.astype(np.float64)
        scale = float(params.pop("codec.scale").data[0])
        return cls(params, config, LatentCodec(config.codec_seed, shift, scale))


# ---------------------------------------------------------------- sampling

def ddim_step(model: Denoiser, x: Tensor, t: int, t_prev: int, cond: Tensor) -> Tensor:
    ab = model.schedule.alpha_bar
    eps = model.predict_eps(x, t, cond)
    x0 = ops.scale(ops.sub(x, ops.scale(eps, math.sqrt(1 - ab[t]))), 1.0 / math.sqrt(ab[t]))
    return ops.add(ops.scale(x0, math.sqrt(ab[t_prev])), ops.scale(eps, math.sqrt(1 - ab[t_prev])))


def ddim_sample(model: Denoiser, x_T, cond, steps: int = 50) -> Tensor:
    """Deterministic DDIM (eta = 0) from x_T to x_0.

    Differentiable through ``x_T`` and ``cond`` when called under a Tape.
    ``cond`` may be a TokenSeq, a (k, d) tensor, or a batched (B, k, d) tensor.
    """
    x = ops.as_tensor(x_T)
    cond = getattr(cond, "tokens", cond)
    cond = ops.as_tensor(cond)
    seq = model.schedule.timesteps(steps)
    for t, t_prev in zip(seq[:-1], seq[1:]):
        x = ddim_step(model, x, t, t_prev, cond)
    return x


def decode_latent(model: Denoiser, x0) -> Tensor:
    return model.codec.decode(ops.as_tensor(x0))


# ---------------------------------------------------------------- training

def _epsilon_loss(model: Denoiser, z0: np.ndarray, cond: np.ndarray, t: np.ndarray, eps: np.ndarray) -> Tensor:
    ab = model.schedule.alpha_bar[t][:, None]
    xt = (np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps).astype(np.float32)
    pred = model.predict_eps(Tensor(xt), t, Tensor(cond))
    diff = ops.sub(pred, Tensor(eps))
    return ops.mean(ops.mul(diff, diff))


def text_token_bank(encoder, samples: Sequence) -> np.ndarray:
    """Pre-projection tokens for all five captions of every sample: (N, 5, n, d)."""
    ids = np.stack([[encoder.tokenize(c) for c in s.captions] for s in samples])
    out = []
    with no_grad():
        for i in range(0, len(ids), 128):
            out.append(encoder.text_tokens(ids[i:i + 128]).data)
    return np.concatenate(out)


def validation_eps_mse(model: Denoiser, z0: np.ndarray, bank: np.ndarray, samples, seed: int = 999) -> float:
    rng = np.random.default_rng(seed)
    caps = np.array([caption_index(s, seed) for s in samples])
    cond = bank[np.arange(len(samples)), caps]
    t = rng.integers(1, model.config.T_steps + 1, size=len(samples))
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    with no_grad():
        return _epsilon_loss(model, z0, cond, t, eps).item()


def train_denoiser(ds: Dataset, encoder, config: DiffusionConfig | None = None,
                   epochs: int | None = None) -> tuple[Denoiser, list[dict]]:
    """Standard epsilon-prediction training with text-token conditioning."""
    config = config or DiffusionConfig()
    epochs = config.epochs if epochs is None else epochs
    train, val = ds.subset("train"), ds.subset("val")
    codec = LatentCodec.fit(np.stack([s.image for s in train]), config.codec_seed)
    model = Denoiser.initialize(config, codec)
    z_train = codec.encode(np.stack([s.image for s in train]))
    z_val = codec.encode(np.stack([s.image for s in val]))
    bank_train = text_token_bank(encoder, train)
    bank_val = text_token_bank(encoder, val)
    trace = [{"epoch": 0, "val_eps_mse": validation_eps_mse(model, z_val, bank_val, val)}]
    if epochs == 0:
        return model, trace
    params = model.params.trainable()
    model.params = params
    opt = Adam(list(params.values()), lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x7A1])
    B = config.batch_size
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        caps = np.array([caption_index(s, config.seed * 1000 + epoch) for s in train])
        losses = []
        for i in range(0, len(order) - B + 1, B):
            idx = order[i:i + B]
            t = rng.integers(1, config.T_steps + 1, size=B)
            eps = rng.standard_normal((B, config.latent_dim)).astype(np.float32)
            opt.zero_grad()
            with Tape() as tape:
                loss = _epsilon_loss(model, z_train[idx], bank_train[idx, caps[idx]], t, eps)
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        if epoch % 10 == 0 or epoch == epochs:
            val_mse = validation_eps_mse(model, z_val, bank_val, val)
            trace.append({"epoch": epoch, "train_eps_mse": float(np.mean(losses)), "val_eps_mse": val_mse})
            log.info("denoiser epoch %d train %.4f val %.4f", epoch, np.mean(losses), val_mse)
    model.params = params.frozen()
    return model, trace
