"""Procedural shape/caption dataset.

Each sample is a 32x32 RGB rendering of one shape (circle, square or
triangle) with a color and a texture over a styled background, described by
five paraphrased captions. Everything is a pure function of the dataset seed
and the sample index, so generation can be split across workers.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import vtf

RESOLUTION = 32
SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.15),
    "cyan": (0.15, 0.80, 0.85),
    "magenta": (0.85, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.20, 0.70),
}
BACKGROUNDS = ("light", "dark", "gradient", "twotone")
TEXTURES = ("flat", "striped", "noisy")

TEMPLATES = (
    "a {color} {shape} on a {background} background",
    "a {texture} {color} {shape}",
    "the {shape} is {color} and {texture}",
    "{background} background behind one {color} {shape}",
    "picture of a {texture} {shape} colored {color}",
)
PAD = "<pad>"


@dataclass
class SynthSample:
    index: int
    image: np.ndarray
    captions: list[str]
    attributes: dict[str, str]
    render_seed: int

    def record(self) -> dict:
        return {
            "index": self.index,
            "captions": self.captions,
            "attributes": self.attributes,
            "render_seed": self.render_seed,
        }


@dataclass
class SplitSpec:
    train: list[int]
    val: list[int]
    test: list[int]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class Dataset:
    samples: list[SynthSample]
    split: SplitSpec
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def subset(self, name: str) -> list[SynthSample]:
        return [self.samples[i] for i in getattr(self.split, name)]

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.image.astype("<f4").tobytes())
            h.update(json.dumps(s.record(), sort_keys=True).encode())
        return h.hexdigest()[:16]


def vocabulary() -> list[str]:
    words = set()
    for tpl in TEMPLATES:
        for shape in SHAPES:
            for color in COLORS:
                for bg in BACKGROUNDS:
                    for tex in TEXTURES:
                        words.update(
                            tpl.format(shape=shape, color=color, background=bg, texture=tex).split()
                        )
    return [PAD] + sorted(words)


def captions_for(attrs: dict[str, str]) -> list[str]:
    return [tpl.format(**attrs) for tpl in TEMPLATES]


def _background(style: str) -> np.ndarray:
    img = np.empty((RESOLUTION, RESOLUTION, 3), dtype=np.float64)
    if style == "light":
        img[:] = (0.82, 0.82, 0.80)
    elif style == "dark":
        img[:] = (0.16, 0.16, 0.20)
    elif style == "gradient":
        ramp = np.linspace(0.15, 0.85, RESOLUTION)[:, None, None]
        img[:] = ramp * np.array([1.0, 0.95, 0.9])
    elif style == "twotone":
        img[: RESOLUTION // 2] = (0.70, 0.72, 0.55)
        img[RESOLUTION // 2:] = (0.30, 0.32, 0.45)
    else:
        raise ValueError(f"unknown background {style!r}")
    return img


def _mask(shape: str, cx: float, cy: float, s: float) -> np.ndarray:
    yy, xx = np.mgrid[0:RESOLUTION, 0:RESOLUTION] + 0.5
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= s * s
    if shape == "square":
        return (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
    if shape == "triangle":
        top = cy - s
        return (yy >= top) & (yy <= cy + s) & (np.abs(xx - cx) <= (yy - top) / 2)
    raise ValueError(f"unknown shape {shape!r}")


def render(attrs: dict[str, str], render_seed: int) -> np.ndarray:
    """Draw the shape described by ``attrs``; deterministic in ``render_seed``."""
    rng = np.random.default_rng(render_seed)
    cx, cy = rng.uniform(11.0, 21.0, size=2)
    size = rng.uniform(6.0, 10.0)
    img = _background(attrs["background"])
    mask = _mask(attrs["shape"], cx, cy, size)
    fill = np.broadcast_to(np.array(COLORS[attrs["color"]]), img.shape).copy()
    tex = attrs["texture"]
    if tex == "striped":
        rows = np.arange(RESOLUTION)[:, None, None]
        fill *= np.where((rows // 3) % 2 == 0, 1.0, 0.6)
    elif tex == "noisy":
        fill += rng.uniform(-0.12, 0.12, size=img.shape)
    elif tex != "flat":
        raise ValueError(f"unknown texture {tex!r}")
    img[mask] = fill[mask]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sample(seed: int, index: int) -> SynthSample:
    rng = np.random.default_rng([seed, index])
    attrs = {
        "shape": SHAPES[rng.integers(len(SHAPES))],
        "color": list(COLORS)[rng.integers(len(COLORS))],
        "background": BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
        "texture": TEXTURES[rng.integers(len(TEXTURES))],
    }
    render_seed = int(rng.integers(2**31 - 1))
    return SynthSample(index, render(attrs, render_seed), captions_for(attrs), attrs, render_seed)


def _make_sample_args(args):
    return make_sample(*args)


def make_split(seed: int, size: int) -> SplitSpec:
    perm = np.random.default_rng([seed, 0x5EED]).permutation(size)
    n_train = int(round(0.8 * size))
    n_val = int(round(0.1 * size))
    return SplitSpec(
        sorted(perm[:n_train].tolist()),
        sorted(perm[n_train:n_train + n_val].tolist()),
        sorted(perm[n_train + n_val:].tolist()),
    )


def generate_dataset(seed: int, size: int, workers: int = 1) -> Dataset:
    if size < 10:
        raise ValueError("dataset size must be at least 10")
    jobs = [(seed, i) for i in range(size)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_make_sample_args, jobs, chunksize=64))
    else:
        samples = [make_sample(*j) for j in jobs]
    return Dataset(samples, make_split(seed, size), seed)


def caption_index(sample: SynthSample, epoch_seed: int) -> int:
    rng = np.random.default_rng([epoch_seed, sample.index, 0xCA9])
    return int(rng.integers(len(sample.captions)))


def sample_caption(sample: SynthSample, epoch_seed: int) -> str:
    """One of the five captions, uniformly, re-drawn for every epoch seed."""
    return sample.captions[caption_index(sample, epoch_seed)]


# ---------------------------------------------------------------- persistence

def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vtf.save(out / "images.vtf", ds.images)
    with open(out / "samples.jsonl", "w") as fh:
        for s in ds.samples:
            fh.write(json.dumps(s.record(), sort_keys=True) + "\n")
    (out / "split.json").write_text(json.dumps(ds.split.to_dict()) + "\n")
    manifest = {
        "seed": ds.seed,
        "size": len(ds),
        "split_sizes": dict(zip(("train", "val", "test"), ds.split.sizes())),
        "resolution": RESOLUTION,
        "digest": ds.digest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {d} (run gen-data first)")
    images = vtf.load(d / "images.vtf")
    samples = []
    with open(d / "samples.jsonl") as fh:
        for line, img in zip(fh, images):
            rec = json.loads(line)
            samples.append(
                SynthSample(rec["index"], img, rec["captions"], rec["attributes"], rec["render_seed"])
            )
    split = SplitSpec(**json.loads((d / "split.json").read_text()))
    manifest = json.loads((d / "manifest.json").read_text())
    return Dataset(samples, split, manifest["seed"], manifest)
