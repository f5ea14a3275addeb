"""Image-to-text token aligner.

A two-layer MLP (linear -> LayerNorm -> ReLU -> linear) maps every image
token into the text-token space. It is trained with a weighted sum of a
global InfoNCE term on mean tokens and a token-level attention
reconstruction term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import Adam, NonFiniteError, ParamSet, Tape, Tensor, load_params, no_grad, ops, save_params
from .core.params import linear_init
from .dataset import Dataset, caption_index
from .encoders import DualEncoder, TokenSeq

log = logging.getLogger(__name__)

LOSS_MODES = ("both", "infonce", "attn")


@dataclass
class AlignTrainConfig:
    lambda_infonce: float = 0.2
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    loss: str = "both"
    tau_init: float = 0.07

    def validate(self) -> None:
        if self.lambda_infonce < 0:
            raise ValueError("lambda_infonce must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (InfoNCE needs negatives)")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")


class Aligner:
    def __init__(self, params: ParamSet, d_image: int, d_text: int, meta: dict | None = None):
        self.params = params
        self.d_image = d_image
        self.d_text = d_text
        self.meta = dict(meta or {})

    @classmethod
    def initialize(cls, d_image: int = 48, d_text: int = 64, seed: int = 0,
                   tau_init: float = 0.07) -> "Aligner":
        rng = np.random.default_rng([seed, 0xA11])
        hidden = 2 * d_text
        raw = {
            "l1.w": linear_init(rng, d_image, hidden),
            "l1.b": np.zeros(hidden, np.float32),
            "ln.g": np.ones(hidden, np.float32),
            "ln.b": np.zeros(hidden, np.float32),
            "l2.w": linear_init(rng, hidden, d_text),
            "l2.b": np.zeros(d_text, np.float32),
            "log_tau": np.array([math.log(tau_init)], np.float32),
        }
        return cls(ParamSet({k: Tensor(v, name=k) for k, v in raw.items()}), d_image, d_text)

    @property
    def tau(self) -> float:
        return float(np.exp(self.params["log_tau"].data[0]))

    def align_tokens(self, tokens: Tensor) -> Tensor:
        """(..., m, d_image) -> (..., m, d_text), applied per token."""
        if tokens.shape[-1] != self.d_image:
            raise ValueError(f"aligner expects width {self.d_image}, got {tokens.shape[-1]}")
        p = self.params
        h = ops.linear(tokens, p["l1.w"], p["l1.b"])
        h = ops.relu(ops.layer_norm(h, p["ln.g"], p["ln.b"]))
        return ops.linear(h, p["l2.w"], p["l2.b"])

    def align(self, seq: TokenSeq) -> TokenSeq:
        if seq.modality != "image":
            raise ValueError(f"align takes image tokens, got {seq.modality!r}")
        return TokenSeq(self.align_tokens(seq.tokens), "aligned")

    def save(self, directory, extra: dict | None = None) -> None:
        manifest = {"kind": "aligner", "d_image": self.d_image, "d_text": self.d_text,
                    "tau": self.tau, **self.meta}
        manifest.update(extra or {})
        save_params(directory, self.params, manifest)

    @classmethod
    def load(cls, directory) -> "Aligner":
        params, manifest = load_params(directory)
        meta = {k: v for k, v in manifest.items() if k not in ("params", "kind", "d_image", "d_text", "tau")}
        return cls(params, manifest["d_image"], manifest["d_text"], meta)


# ---------------------------------------------------------------- losses

def loss_infonce(mu_img: Tensor, mu_txt: Tensor, log_tau: Tensor) -> Tensor:
    """Image->text cross-entropy of cosine/tau logits with in-batch negatives."""
    if mu_img.ndim != 2 or mu_img.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 mean embeddings")
    if mu_img.shape != mu_txt.shape:
        raise ValueError(f"batch shape mismatch {mu_img.shape} vs {mu_txt.shape}")
    cos = ops.matmul(ops.normalize(mu_img), ops.swap_last(ops.normalize(mu_txt)))
    logits = ops.mul(cos, ops.exp(ops.scale(log_tau, -1.0)))
    return ops.cross_entropy(logits, np.arange(mu_img.shape[0]))


def loss_attn_recon(aligned: Tensor, text: Tensor) -> Tensor:
    """MSE between Attn(Q=aligned, K=V=text) and text over the common row prefix."""
    if aligned.shape[-1] != text.shape[-1]:
        raise ValueError(f"width mismatch {aligned.shape[-1]} vs {text.shape[-1]}")
    rec = ops.sdp_attention(aligned, text, text)
    k = min(aligned.shape[-2], text.shape[-2])
    diff = ops.sub(ops.rows(rec, 0, k), ops.rows(text, 0, k))
    return ops.mean(ops.mul(diff, diff))


def loss_terms(aligner: Aligner, img_tokens: Tensor, txt_tokens: Tensor) -> tuple[Tensor, Tensor]:
    """(InfoNCE, attention reconstruction) for a batch (B, m, d_image) / (B, n, d_text)."""
    aligned = aligner.align_tokens(img_tokens)
    nce = loss_infonce(ops.mean_rows(aligned), ops.mean_rows(txt_tokens), aligner.params["log_tau"])
    return nce, loss_attn_recon(aligned, txt_tokens)


def loss_align(aligner: Aligner, img_tokens: Tensor, txt_tokens: Tensor,
               lam: float = 0.2) -> tuple[Tensor, dict]:
    """lam * InfoNCE + attention reconstruction; the two terms are also returned."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    nce, attn = loss_terms(aligner, img_tokens, txt_tokens)
    total = ops.add(ops.scale(nce, lam), attn)
    return total, {"infonce": nce.item(), "attn": attn.item()}


def _objective(mode: str, lam: float, nce: Tensor, attn: Tensor) -> Tensor:
    if mode == "infonce":
        return nce
    if mode == "attn":
        return attn
    return ops.add(ops.scale(nce, lam), attn)


# ---------------------------------------------------------------- diagnostics

def kl_proxy(aligned_tokens, text_tokens, var_eps: float = 1e-6) -> float:
    """KL(N(mu_a, diag var_a) || N(mu_t, diag var_t)) from pooled token rows."""
    a = np.asarray(getattr(aligned_tokens, "data", aligned_tokens), dtype=np.float64)
    t = np.asarray(getattr(text_tokens, "data", text_tokens), dtype=np.float64)
    a = a.reshape(-1, a.shape[-1])
    t = t.reshape(-1, t.shape[-1])
    if a.shape[1] != t.shape[1]:
        raise ValueError(f"width mismatch {a.shape[1]} vs {t.shape[1]}")
    mu_a, var_a = a.mean(0), a.var(0) + var_eps
    mu_t, var_t = t.mean(0), t.var(0) + var_eps
    kl = 0.5 * (np.log(var_t / var_a) + (var_a + (mu_a - mu_t) ** 2) / var_t - 1.0)
    return float(max(kl.sum(), 0.0))


def pad_to_width(tokens: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad raw image tokens to the text width (the unaligned baseline)."""
    out = np.zeros((*tokens.shape[:-1], width), dtype=tokens.dtype)
    out[..., : tokens.shape[-1]] = tokens
    return out


# ---------------------------------------------------------------- training

def image_token_bank(encoder: DualEncoder, samples, batch: int = 256) -> np.ndarray:
    images = np.stack([s.image for s in samples])
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(encoder.image_tokens(Tensor(images[i:i + batch])).data)
    return np.concatenate(out)


def caption_tokens(encoder: DualEncoder, samples, epoch_seed: int) -> np.ndarray:
    ids = np.stack([encoder.tokenize(s.captions[caption_index(s, epoch_seed)]) for s in samples])
    with no_grad():
        return encoder.text_tokens(ids).data


def evaluate_align(aligner: Aligner, img: np.ndarray, txt: np.ndarray, lam: float,
                   batch: int) -> dict:
    """Mean loss terms over consecutive batches (a trailing batch of one is dropped)."""
    nces, attns, weights = [], [], []
    with no_grad():
        for i in range(0, len(img), batch):
            if len(img) - i < 2:
                break
            nce, attn = loss_terms(aligner, Tensor(img[i:i + batch]), Tensor(txt[i:i + batch]))
            nces.append(nce.item())
            attns.append(attn.item())
            weights.append(len(img[i:i + batch]))
    nce = float(np.average(nces, weights=weights))
    attn = float(np.average(attns, weights=weights))
    return {"infonce": nce, "attn": attn, "align": lam * nce + attn}


VAL_CAPTION_SEED = 4242


def train_aligner(ds: Dataset, encoder: DualEncoder,
                  config: AlignTrainConfig | None = None) -> tuple[Aligner, list[dict]]:
    config = config or AlignTrainConfig()
    config.validate()
    ec = encoder.config
    aligner = Aligner.initialize(ec.d_image, ec.d_text, config.seed, config.tau_init)
    aligner.meta = {"lambda_infonce": config.lambda_infonce, "seed": config.seed, "epochs": config.epochs,
                    "loss": config.loss, "dataset": ds.digest()}
    train, val = ds.subset("train"), ds.subset("val")
    img_train = image_token_bank(encoder, train)
    img_val = image_token_bank(encoder, val)
    txt_val = caption_tokens(encoder, val, VAL_CAPTION_SEED)
    lam, B = config.lambda_infonce, config.batch_size
    first = evaluate_align(aligner, img_val, txt_val, lam, B)
    trace = [{"epoch": 0, **{f"val_{k}": v for k, v in first.items()}, "tau": aligner.tau}]
    if config.epochs == 0:
        return aligner, trace
    from .diffusion import text_token_bank

    bank = text_token_bank(encoder, train)
    params = aligner.params.trainable()
    aligner.params = params
    opt = Adam(list(params.values()), lr=config.lr)
    rng = np.random.default_rng([config.seed, 0xA7])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        caps = np.array([caption_index(s, config.seed * 1000 + epoch) for s in train])
        totals, nces, attns = [], [], []
        for i in range(0, len(order) - B + 1, B):
            idx = order[i:i + B]
            opt.zero_grad()
            with Tape() as tape:
                nce, attn = loss_terms(aligner, Tensor(img_train[idx]), Tensor(bank[idx, caps[idx]]))
                loss = _objective(config.loss, lam, nce, attn)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"aligner loss became non-finite at epoch {epoch}, step {i // B}")
            tape.backward(loss)
            opt.step()
            totals.append(lam * nce.item() + attn.item())
            nces.append(nce.item())
            attns.append(attn.item())
        val_terms = evaluate_align(aligner, img_val, txt_val, lam, B)
        row = {"epoch": epoch, "train_align": float(np.mean(totals)),
               "train_infonce": float(np.mean(nces)), "train_attn": float(np.mean(attns)),
               **{f"val_{k}": v for k, v in val_terms.items()}, "tau": aligner.tau}
        trace.append(row)
        log.info("aligner epoch %d val align %.4f (nce %.4f attn %.4f)", epoch,
                 val_terms["align"], val_terms["infonce"], val_terms["attn"])
    aligner.params = params.frozen()
    return aligner, trace
