"""Named parameter bundles and their on-disk form (VTF1 files + manifest.json)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import vtf
from .tensor import Tensor

MANIFEST = "manifest.json"


class ParamSet(dict):
    """Ordered mapping of parameter name -> Tensor."""

    def trainable(self) -> "ParamSet":
        """Fresh tensors with the same values that require gradients."""
        return ParamSet({k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.items()})

    def frozen(self) -> "ParamSet":
        return ParamSet({k: Tensor(v.data, name=k) for k, v in self.items()})

    def snapshot(self) -> dict[str, bytes]:
        return {k: v.data.tobytes() for k, v in self.items()}

    def num_values(self) -> int:
        return int(sum(v.size for v in self.values()))


def normal_init(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return normal_init(rng, (fan_in, fan_out), gain / np.sqrt(fan_in))


def save_params(directory, params: ParamSet, manifest: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, t in params.items():
        vtf.save(d / f"{name}.vtf", t.data)
    body = dict(manifest)
    body["params"] = list(params.keys())
    (d / MANIFEST).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def load_params(directory) -> tuple[ParamSet, dict]:
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    params = ParamSet()
    for name in manifest["params"]:
        params[name] = Tensor(vtf.load(d / f"{name}.vtf"), name=name)
    return params, manifest
