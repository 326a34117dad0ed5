"""Reverse-mode differentiation on dense float64 arrays, plus layers and Adam."""

from . import checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import LSTM, MLP, BatchNorm, CoordConv2d, Linear, Module, coord_channels, parameter
from .optim import AdamState, MissingGradError, PlateauSchedule, adam_step, plateau_update
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    clip,
    concat,
    conv2d,
    div,
    exp,
    expand_dims,
    getitem,
    log,
    log_softmax,
    logsumexp,
    matmul,
    maxpool2d,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    take_rows,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "AdamState", "BatchNorm", "CoordConv2d", "LSTM", "Linear", "MLP", "MissingGradError",
    "Module", "PlateauSchedule", "ShapeError", "Tensor", "adam_step", "add", "as_tensor",
    "broadcast_to", "check_gradients", "checkpoint", "clip", "concat", "conv2d", "coord_channels",
    "div", "exp", "expand_dims", "getitem", "log", "log_softmax", "logsumexp", "matmul",
    "maxpool2d", "mean", "mul", "neg", "numeric_grad", "parameter", "plateau_update", "power",
    "relative_error", "relu", "reshape", "sigmoid", "softmax", "sqrt", "square", "stack", "sub",
    "take_rows", "tanh", "transpose", "tsum",
]
