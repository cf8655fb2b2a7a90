"""Minimal reverse-mode layer library in float64 numpy."""

from .layers import (BatchNorm, Conv2D, ConvTranspose2D, Dense, Dropout, Flatten, LeakyReLU,
                     MaxPool2D, ReLU, Reshape, Sigmoid, Softmax, Tanh, sigmoid, softmax)
from .losses import bernoulli_nll, gaussian_nll, softmax_cross_entropy
from .model import MissingCacheError, Sequential, Tape
from .optim import OptimizerState, optimizer_step
from .params import NonFiniteError, ParameterSet, check_finite, global_l2_norm

__all__ = [
    "BatchNorm", "Conv2D", "ConvTranspose2D", "Dense", "Dropout", "Flatten", "LeakyReLU",
    "MaxPool2D", "MissingCacheError", "NonFiniteError", "OptimizerState", "ParameterSet",
    "ReLU", "Reshape", "Sequential", "Sigmoid", "Softmax", "Tanh", "Tape", "bernoulli_nll",
    "check_finite", "gaussian_nll", "global_l2_norm", "optimizer_step", "sigmoid", "softmax",
    "softmax_cross_entropy",
]
