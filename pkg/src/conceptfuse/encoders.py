"""Frozen toy dual encoder standing in for CLIP.

Each branch is embeddings -> one pre-LN self-attention block -> one
feed-forward block. The block output is the *pre-projection* token sequence;
mean pooling followed by the branch's projection matrix gives the shared,
contrastively trained embedding space.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import Adam, ParamSet, Tape, Tensor, load_params, no_grad, ops, save_params
from .core.params import linear_init, normal_init
from .dataset import PAD, Dataset, caption_index, vocabulary

log = logging.getLogger(__name__)

MODALITIES = ("text", "image", "aligned", "fused")


@dataclass
class EncoderConfig:
    d_text: int = 64
    d_image: int = 48
    d_proj: int = 32
    n_max: int = 16
    resolution: int = 32
    patch: int = 8
    ffn_mult: int = 2
    seed: int = 0
    epochs: int = 15
    lr: float = 2e-3
    batch_size: int = 32
    temperature: float = 0.1

    @property
    def num_patches(self) -> int:
        return (self.resolution // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3


@dataclass
class TokenSeq:
    tokens: Tensor
    modality: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"token sequence needs shape (count>=1, width), got {self.tokens.shape}")

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def _block_params(rng, prefix: str, d: int, hidden: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.ln1.g": np.ones(d, np.float32),
        f"{prefix}.ln1.b": np.zeros(d, np.float32),
        f"{prefix}.attn.q": linear_init(rng, d, d),
        f"{prefix}.attn.k": linear_init(rng, d, d),
        f"{prefix}.attn.v": linear_init(rng, d, d),
        f"{prefix}.attn.o": linear_init(rng, d, d, 0.5),
        f"{prefix}.ln2.g": np.ones(d, np.float32),
        f"{prefix}.ln2.b": np.zeros(d, np.float32),
        f"{prefix}.ffn.w1": linear_init(rng, d, hidden),
        f"{prefix}.ffn.b1": np.zeros(hidden, np.float32),
        f"{prefix}.ffn.w2": linear_init(rng, hidden, d, 0.5),
        f"{prefix}.ffn.b2": np.zeros(d, np.float32),
    }


def init_encoder_params(cfg: EncoderConfig) -> ParamSet:
    rng = np.random.default_rng([cfg.seed, 0xE4C])
    vocab = vocabulary()
    raw: dict[str, np.ndarray] = {
        "text.tok": normal_init(rng, (len(vocab), cfg.d_text), 1.0),
        "text.pos": normal_init(rng, (cfg.n_max, cfg.d_text), 0.5),
    }
    raw.update(_block_params(rng, "text", cfg.d_text, cfg.ffn_mult * cfg.d_text))
    raw["text.proj"] = linear_init(rng, cfg.d_text, cfg.d_proj)
    raw["image.patch.w"] = linear_init(rng, cfg.patch_dim, cfg.d_image, 2.0)
    raw["image.patch.b"] = np.zeros(cfg.d_image, np.float32)
    raw["image.pos"] = normal_init(rng, (cfg.num_patches, cfg.d_image), 0.5)
    raw.update(_block_params(rng, "image", cfg.d_image, cfg.ffn_mult * cfg.d_image))
    raw["image.proj"] = linear_init(rng, cfg.d_image, cfg.d_proj)
    return ParamSet({k: Tensor(v, name=k) for k, v in raw.items()})


def _block(p: ParamSet, prefix: str, x: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (post-attention stream, post-FFN stream)."""
    h = ops.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    a = ops.sdp_attention(
        ops.matmul(h, p[f"{prefix}.attn.q"]),
        ops.matmul(h, p[f"{prefix}.attn.k"]),
        ops.matmul(h, p[f"{prefix}.attn.v"]),
    )
    x = ops.add(x, ops.matmul(a, p[f"{prefix}.attn.o"]))
    h = ops.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = ops.silu(ops.linear(h, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"]))
    y = ops.add(x, ops.linear(h, p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"]))
    return x, y


class DualEncoder:
    """Text and image branches sharing a projected embedding space."""

    def __init__(self, params: ParamSet, config: EncoderConfig):
        self.params = params
        self.config = config
        self.vocab = vocabulary()
        self.word_to_id = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def initialize(cls, config: EncoderConfig | None = None) -> "DualEncoder":
        config = config or EncoderConfig()
        return cls(init_encoder_params(config), config)

    # -------------------------------------------------------------- text
    def tokenize(self, caption: str) -> np.ndarray:
        words = caption.split()
        if not words:
            raise ValueError("empty caption")
        try:
            ids = [self.word_to_id[w] for w in words]
        except KeyError as err:
            raise ValueError(f"unknown word {err.args[0]!r} (not in the caption vocabulary)") from None
        ids = ids[: self.config.n_max]
        ids += [self.word_to_id[PAD]] * (self.config.n_max - len(ids))
        return np.array(ids, dtype=np.int64)

    def text_tokens(self, ids) -> Tensor:
        """(…, n_max) int ids -> (…, n_max, d_text) pre-projection tokens."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.vocab)):
            raise ValueError("token id outside the vocabulary")
        p = self.params
        x = ops.add(ops.embedding(p["text.tok"], ids), p["text.pos"])
        return _block(p, "text", x)[1]

    def encode_text(self, caption) -> TokenSeq:
        ids = self.tokenize(caption) if isinstance(caption, str) else np.asarray(caption)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("caption must be a non-empty id sequence")
        if ids.size != self.config.n_max:
            ids = ids[: self.config.n_max]
            ids = np.concatenate([ids, np.zeros(self.config.n_max - ids.size, np.int64)])
        return TokenSeq(self.text_tokens(ids), "text")

    # -------------------------------------------------------------- image
    def _check_images(self, images: Tensor) -> None:
        r = self.config.resolution
        if images.shape[-3:] != (r, r, 3):
            raise ValueError(f"images must be {r}x{r}x3, got {images.shape}")
        d = images.data
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    def patchify(self, images: Tensor) -> Tensor:
        lead = images.shape[:-3]
        g = self.config.resolution // self.config.patch
        pp = self.config.patch
        x = ops.reshape(images, (*lead, g, pp, g, pp, 3))
        k = len(lead)
        x = ops.permute(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
        return ops.reshape(x, (*lead, g * g, pp * pp * 3))

    def image_stages(self, images) -> list[Tensor]:
        """Activations after patch embedding, attention and FFN."""
        images = ops.as_tensor(images)
        self._check_images(images)
        p = self.params
        s1 = ops.add(ops.linear(self.patchify(images), p["image.patch.w"], p["image.patch.b"]), p["image.pos"])
        s2, s3 = _block(p, "image", s1)
        return [s1, s2, s3]

    def image_tokens(self, images) -> Tensor:
        return self.image_stages(images)[2]

    def encode_image(self, image) -> TokenSeq:
        image = ops.as_tensor(image)
        if image.ndim != 3:
            raise ValueError("encode_image takes a single H x W x 3 image")
        return TokenSeq(self.image_tokens(image), "image")

    # -------------------------------------------------------------- shared space
    def projection_for(self, modality: str) -> Tensor:
        return self.params["image.proj" if modality == "image" else "text.proj"]

    def project_tokens(self, tokens: Tensor, modality: str) -> Tensor:
        pooled = ops.mean_rows(tokens)
        z = ops.matmul(ops.reshape(pooled, (-1, pooled.shape[-1])), self.projection_for(modality))
        z = ops.reshape(z, (*pooled.shape[:-1], z.shape[-1]))
        return ops.normalize(z)

    def project_clip(self, seq: TokenSeq) -> Tensor:
        return self.project_tokens(seq.tokens, seq.modality)

    def embed_images(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(images), batch):
                toks = self.image_tokens(Tensor(images[i:i + batch]))
                out.append(self.project_tokens(toks, "image").data)
        return np.concatenate(out)

    def embed_captions(self, captions: Sequence[str]) -> np.ndarray:
        ids = np.stack([self.tokenize(c) for c in captions])
        with no_grad():
            return self.project_tokens(self.text_tokens(ids), "text").data

    # -------------------------------------------------------------- persistence
    def save(self, directory, extra: dict | None = None) -> None:
        manifest = {"kind": "encoders", "config": asdict(self.config)}
        manifest.update(extra or {})
        save_params(directory, self.params, manifest)

    @classmethod
    def load(cls, directory) -> "DualEncoder":
        params, manifest = load_params(directory)
        return cls(params, EncoderConfig(**manifest["config"]))


def symmetric_infonce(zi: Tensor, zt: Tensor, temperature: float) -> Tensor:
    logits = ops.scale(ops.matmul(zi, ops.swap_last(zt)), 1.0 / temperature)
    targets = np.arange(zi.shape[0])
    return ops.scale(
        ops.add(ops.cross_entropy(logits, targets), ops.cross_entropy(ops.swap_last(logits), targets)),
        0.5,
    )


def retrieval_accuracy(enc: DualEncoder, ds: Dataset, split: str = "val",
                       batch: int = 32, epoch_seed: int = 12345) -> float:
    """Top-1 in-batch image->text retrieval accuracy over consecutive batches."""
    samples = ds.subset(split)
    batch = min(batch, len(samples))
    hits = total = 0
    for i in range(0, len(samples) - batch + 1, batch):
        chunk = samples[i:i + batch]
        zi = enc.embed_images(np.stack([s.image for s in chunk]))
        zt = enc.embed_captions([s.captions[caption_index(s, epoch_seed)] for s in chunk])
        hits += int((np.argmax(zi @ zt.T, axis=1) == np.arange(len(chunk))).sum())
        total += len(chunk)
    return hits / max(total, 1)


def contrastive_loss(enc: DualEncoder, ds: Dataset, split: str = "val",
                     batch: int = 32, epoch_seed: int = 12345) -> float:
    samples = ds.subset(split)
    batch = min(batch, len(samples))
    losses = []
    with no_grad():
        for i in range(0, len(samples) - batch + 1, batch):
            chunk = samples[i:i + batch]
            ids = np.stack([enc.tokenize(s.captions[caption_index(s, epoch_seed)]) for s in chunk])
            zt = enc.project_tokens(enc.text_tokens(ids), "text")
            zi = enc.project_tokens(enc.image_tokens(Tensor(np.stack([s.image for s in chunk]))), "image")
            losses.append(symmetric_infonce(zi, zt, enc.config.temperature).item())
    return float(np.mean(losses))


def pretrain_contrastive(ds: Dataset, config: EncoderConfig | None = None,
                         epochs: int | None = None, lr: float | None = None) -> tuple[DualEncoder, list[dict]]:
    """Symmetric InfoNCE over projected embeddings; returns frozen weights and a trace."""
    config = config or EncoderConfig()
    epochs = config.epochs if epochs is None else epochs
    lr = config.lr if lr is None else lr
    enc = DualEncoder.initialize(config)
    trace = [{"epoch": 0, "val_loss": contrastive_loss(enc, ds), "val_acc": retrieval_accuracy(enc, ds)}]
    if epochs == 0:
        return enc, trace
    params = enc.params.trainable()
    enc.params = params
    opt = Adam(list(params.values()), lr=lr)
    train = ds.subset("train")
    images = np.stack([s.image for s in train])
    rng = np.random.default_rng([config.seed, 0x9E7])
    B = config.batch_size
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order) - B + 1, B):
            idx = order[i:i + B]
            ids = np.stack([
                enc.tokenize(train[j].captions[caption_index(train[j], config.seed * 1000 + epoch)])
                for j in idx
            ])
            opt.zero_grad()
            with Tape() as tape:
                zt = enc.project_tokens(enc.text_tokens(ids), "text")
                zi = enc.project_tokens(enc.image_tokens(Tensor(images[idx])), "image")
                loss = symmetric_infonce(zi, zt, config.temperature)
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        acc = retrieval_accuracy(enc, ds)
        trace.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                      "val_loss": contrastive_loss(enc, ds), "val_acc": acc})
        log.info("encoder epoch %d loss %.4f val acc %.3f", epoch, np.mean(losses), acc)
    enc.params = params.frozen()
    return enc, trace
