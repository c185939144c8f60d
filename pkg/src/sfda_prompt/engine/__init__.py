"""Reverse-mode differentiation engine."""
from .batchnorm import BatchStats, BnLayerState, batchnorm_apply
from .gradcheck import analytic_grad, grad_check, numerical_grad
from .ops import (
    activation,
    add,
    binary_cross_entropy,
    channel_mean,
    channel_std,
    concat,
    conv2d,
    div,
    down2_avg,
    l1_distance,
    mean_all,
    mul,
    normalize_affine,
    relu,
    resample,
    reshape,
    sigmoid,
    sub,
    sum_all,
    transpose,
    up2_nearest,
)
from .optim import OptimizerState, poly_decay_lr, sgd_momentum_step
from .tensor import Tensor, as_tensor, backward

__all__ = [
    "BatchStats", "BnLayerState", "OptimizerState", "Tensor",
    "activation", "add", "analytic_grad", "as_tensor", "backward", "batchnorm_apply",
    "binary_cross_entropy", "channel_mean", "channel_std", "concat", "conv2d", "div",
    "down2_avg", "grad_check", "l1_distance", "mean_all", "mul", "normalize_affine",
    "numerical_grad", "poly_decay_lr", "relu", "resample", "reshape", "sgd_momentum_step",
    "sigmoid", "sub", "sum_all", "transpose", "up2_nearest",
]
