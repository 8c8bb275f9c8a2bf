"""Minimal reverse-mode autodiff engine on numpy arrays."""

from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    absolute,
    apply_op,
    as_tensor,
    backward,
    clip,
    concat,
    current_tape,
    div,
    exp,
    log,
    matmul,
    mul,
    neg,
    power,
    reshape,
    sqrt,
    take_slice,
    tensor_mean,
    tensor_sum,
)
from .layers import (
    avgpool2d,
    batchnorm2d,
    concat_channels,
    conv2d,
    dropout,
    elu,
    fully_connected,
    relu,
    softmax_channel,
    upsample_nearest2,
)
from .optim import Adam
from .check import check_gradients, finite_difference_gradient, max_relative_error

__all__ = [
    "DEFAULT_DTYPE",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "Adam",
    "absolute",
    "apply_op",
    "as_tensor",
    "avgpool2d",
    "backward",
    "batchnorm2d",
    "check_gradients",
    "clip",
    "concat",
    "concat_channels",
    "conv2d",
    "current_tape",
    "div",
    "dropout",
    "elu",
    "exp",
    "finite_difference_gradient",
    "fully_connected",
    "log",
    "matmul",
    "max_relative_error",
    "mul",
    "neg",
    "power",
    "relu",
    "reshape",
    "softmax_channel",
    "sqrt",
    "take_slice",
    "tensor_mean",
    "tensor_sum",
    "upsample_nearest2",
]
