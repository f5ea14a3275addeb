"""Run configuration: one JSON document, validated strictly before any work starts."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .aligner import LOSS_MODES, AlignTrainConfig
from .diffusion import DiffusionConfig
from .encoders import EncoderConfig
from .fusion import STRATEGIES, FusionConfig
from .pno import PnoConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # hyperparameters of the method
    ddim_steps: int = 50
    alpha: float = 0.3
    lambda_infonce: float = 0.2
    epochs: int = 10
    fusion: str = "concat"
    rescale: bool = True
    pno: PnoConfig = field(default_factory=PnoConfig)
    # artifact decisions
    seed: int = 0
    data_size: int = 2000
    eval_pairs: int = 50
    eval_seeds: list = field(default_factory=lambda: [0, 1, 2])
    pno_pairs: int = 20
    aligner_batch_size: int = 32
    aligner_lr: float = 1e-3
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DiffusionConfig = field(default_factory=DiffusionConfig)

    # -------------------------------------------------------------- io
    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = _build(cls, raw, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    # -------------------------------------------------------------- checks
    def validate(self) -> None:
        T = self.denoiser.T_steps
        checks = [
            (1 <= self.ddim_steps <= T, f"ddim_steps must lie in [1, {T}]"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (self.lambda_infonce >= 0, "lambda_infonce must be >= 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.fusion in STRATEGIES, f"fusion must be one of {STRATEGIES}"),
            (self.data_size >= 10, "data_size must be >= 10"),
            (self.eval_pairs >= 1, "eval_pairs must be >= 1"),
            (len(self.eval_seeds) >= 1, "eval_seeds must not be empty"),
            (all(isinstance(s, int) and not isinstance(s, bool) for s in self.eval_seeds),
             "eval_seeds must be integers"),
            (self.pno_pairs >= 0, "pno_pairs must be >= 0"),
            (self.aligner_batch_size >= 2, "aligner_batch_size must be >= 2"),
            (self.aligner_lr > 0, "aligner_lr must be > 0"),
            (self.encoders.epochs >= 0 and self.denoiser.epochs >= 0, "training epochs must be >= 0"),
            (self.denoiser.cond_dim == self.encoders.d_text, "denoiser.cond_dim must equal encoders.d_text"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        try:
            self.pno.validate()
        except ValueError as err:
            raise ConfigError(f"pno: {err}") from None

    # -------------------------------------------------------------- views
    def encoder_config(self) -> EncoderConfig:
        return dataclasses.replace(self.encoders, seed=self.seed)

    def diffusion_config(self) -> DiffusionConfig:
        return dataclasses.replace(self.denoiser, seed=self.seed)

    def align_config(self, loss: str = "both") -> AlignTrainConfig:
        if loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}")
        return AlignTrainConfig(self.lambda_infonce, self.epochs, self.aligner_batch_size,
                                self.aligner_lr, self.seed, loss)

    def fusion_config(self, strategy: str | None = None, alpha: float | None = None) -> FusionConfig:
        return FusionConfig(strategy or self.fusion, self.alpha if alpha is None else alpha, self.rescale)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        default = getattr(defaults, name)
        key = where + name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key + ".")
        else:
            kwargs[name] = _coerce(value, default, key)
    return cls(**kwargs)


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return list(value)
    return value
