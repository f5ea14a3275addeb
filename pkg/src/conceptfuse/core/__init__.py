"""Minimal dense tensors with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import gradcheck, relative_error
from .kernels import BACKEND
from .optim import SGD, Adam, clip_grad_norm, global_grad_norm
from .params import ParamSet, load_params, save_params
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
)

__all__ = [
    "BACKEND",
    "Adam",
    "NonFiniteError",
    "ParamSet",
    "SGD",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "clip_grad_norm",
    "default_dtype",
    "global_grad_norm",
    "gradcheck",
    "load_params",
    "no_grad",
    "ops",
    "precision",
    "relative_error",
    "save_params",
]
