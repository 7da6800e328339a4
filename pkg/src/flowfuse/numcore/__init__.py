"""Dense numpy arrays with tape-based reverse-mode differentiation."""

from .ops import (
    add,
    concat,
    conv2d,
    group_norm,
    linear,
    mean,
    mse,
    mul_scalar,
    reshape,
    scale_shift,
    self_attention,
    silu,
    sum,
    upsample_nearest,
)
from .tensor import NumericError, Tape, Tensor, active_tape, default_dtype, precision, tensor

__all__ = [
    "NumericError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "concat",
    "conv2d",
    "default_dtype",
    "group_norm",
    "linear",
    "mean",
    "mse",
    "mul_scalar",
    "precision",
    "reshape",
    "scale_shift",
    "self_attention",
    "silu",
    "sum",
    "tensor",
    "upsample_nearest",
]
