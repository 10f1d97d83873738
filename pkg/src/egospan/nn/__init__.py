"""Hand-written tensor layers, networks, optimizers and weight files."""

from .gradcheck import gradient_check
from .layers import (
    BilinearUpsample2d,
    Conv2d,
    Conv3d,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    Sigmoid,
    concat_backward,
    concat_forward,
)
from .network import Network, Sequential, scoped
from .optim import SGD, Adam
from .serialize import load_weights, save_weights

__all__ = [
    "Adam",
    "BilinearUpsample2d",
    "Conv2d",
    "Conv3d",
    "Flatten",
    "Layer",
    "Linear",
    "MaxPool2d",
    "Network",
    "ReLU",
    "SGD",
    "Sequential",
    "Sigmoid",
    "concat_backward",
    "concat_forward",
    "gradient_check",
    "load_weights",
    "save_weights",
    "scoped",
]
