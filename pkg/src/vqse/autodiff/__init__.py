"""Minimal reverse-mode autodiff over numpy."""

from .layers import (BatchNormState, batch_norm2d, conv2d, conv_transpose2d, cosine_distance,
                     gru_layer, gru_stack, linear, local_patches)
from .optim import Adam
from .tensor import (GraphError, Parameter, Tensor, backward, clamp_min, concat, constant_choice,
                     detach, exp, frozen_constants, log, matmul, mean, no_grad, relu, reshape, sigmoid,
                     sqrt, square, stop_gradient, sum_, tanh, transpose)
from .gradcheck import grad_check, numeric_grad, relative_error

__all__ = [
    "Adam", "BatchNormState", "GraphError", "Parameter", "Tensor", "backward", "batch_norm2d",
    "clamp_min", "concat", "constant_choice", "conv2d", "conv_transpose2d", "cosine_distance",
    "detach", "exp", "frozen_constants", "grad_check", "gru_layer", "gru_stack", "linear",
    "local_patches", "log", "matmul", "mean", "no_grad", "numeric_grad", "relative_error", "relu",
    "reshape", "sigmoid", "sqrt", "square", "stop_gradient", "sum_", "tanh", "transpose",
]
