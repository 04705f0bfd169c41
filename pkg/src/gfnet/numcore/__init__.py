"""Minimal dense-tensor numerics with reverse-mode autodiff."""

from .kernels import BACKEND
from .nn import (
    Conv2d,
    GRUCell,
    Linear,
    Module,
    Parameter,
    conv2d,
    global_avg_pool,
    gru_cell,
    linear,
    softmax,
    softmax_cross_entropy,
)
from .optim import Optimizer, OptimizerConfig, cosine_lr, learning_rate_at
from .tensor import (
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    div,
    exp,
    is_grad_enabled,
    log,
    matmul,
    mean,
    minimum,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "BACKEND", "Conv2d", "GRUCell", "Linear", "Module", "Optimizer", "OptimizerConfig", "Parameter",
    "Tensor", "add", "as_tensor", "clip", "concat", "conv2d", "cosine_lr", "div", "exp",
    "global_avg_pool", "gru_cell", "is_grad_enabled", "learning_rate_at", "linear", "log", "matmul",
    "mean", "minimum", "mul", "no_grad", "relu", "reshape", "sigmoid", "softmax",
    "softmax_cross_entropy", "stack", "sub", "tanh", "transpose", "tsum",
]
