from .functional import (
    ConfigError,
    conv2d,
    cross_entropy_rows,
    linear,
    log_softmax_np,
    max_pool2d,
    mse_loss,
    relu,
    softmax,
    softmax_cross_entropy,
    softmax_np,
)
from .init import xavier_bound, xavier_uniform
from .layers import Conv2d, Flatten, Linear, MaxPool2d, Module, ReLU, Sequential
from .optim import SGD, Adam, Optimizer, make_optimizer
from .tensor import GraphError, Parameter, ShapeError, Tensor, concat, no_grad, precision

__all__ = [
    "Adam", "ConfigError", "Conv2d", "Flatten", "GraphError", "Linear", "MaxPool2d", "Module",
    "Optimizer", "Parameter", "ReLU", "SGD", "Sequential", "ShapeError", "Tensor", "concat",
    "conv2d", "cross_entropy_rows", "linear", "log_softmax_np", "make_optimizer", "max_pool2d",
    "mse_loss", "no_grad", "precision", "relu", "softmax", "softmax_cross_entropy", "softmax_np",
    "xavier_bound", "xavier_uniform",
]
