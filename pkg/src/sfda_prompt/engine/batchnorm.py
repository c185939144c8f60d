"""Batch normalization with explicit running-statistics state."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import RejectedInputError
from . import ops
from .tensor import Tensor

MODES = ("train", "eval", "stat_collect")


@dataclass
class BatchStats:
    """Per-channel mean and standard deviation of one BN input.

    In train/stat_collect mode both are graph nodes, so a loss built from
    them backpropagates into whatever produced the layer input.
    """

    mean: Tensor
    std: Tensor


@dataclass
class BnLayerState:
    channels: int
    running_mean: np.ndarray = None
    running_std: np.ndarray = None
    scale: Tensor = None
    shift: Tensor = None
    momentum: float = 0.1
    eps: float = ops.BN_EPS
    dtype: type = field(default=np.float32, repr=False)

    def __post_init__(self):
        if self.channels < 1:
            raise RejectedInputError(f"BN layer needs at least one channel, got {self.channels}")
        if not 0.0 < self.momentum < 1.0:
            raise RejectedInputError(f"BN momentum must be in (0, 1), got {self.momentum}")
        c = self.channels
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=self.dtype)
        if self.running_std is None:
            self.running_std = np.ones(c, dtype=self.dtype)
        if self.scale is None:
            self.scale = Tensor(np.ones(c, dtype=self.dtype), requires_grad=True)
        if self.shift is None:
            self.shift = Tensor(np.zeros(c, dtype=self.dtype), requires_grad=True)
        for name in ("running_mean", "running_std"):
            if getattr(self, name).shape != (c,):
                raise RejectedInputError(f"{name} must have length {c}")
        for name in ("scale", "shift"):
            if getattr(self, name).shape != (c,):
                raise RejectedInputError(f"{name} must have length {c}")


def batchnorm_apply(x, layer, mode):
    """Normalize an NCHW batch; returns ``(output, BatchStats)``.

    ``train`` and ``stat_collect`` share the batch-statistics arithmetic;
    only ``train`` folds the batch statistics into the running buffers.
    ``eval`` uses the running buffers and echoes them as the stats.
    """
    if mode not in MODES:
        raise RejectedInputError(f"unknown BN mode {mode!r}")
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise RejectedInputError(f"BN layer expects {layer.channels} channels, got input shape {x.shape}")
    if mode == "eval":
        out = ops.normalize_affine(x, layer.running_mean, layer.running_std, layer.scale, layer.shift)
        stats = BatchStats(Tensor(layer.running_mean.copy()), Tensor(layer.running_std.copy()))
        return out, stats
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise RejectedInputError("batch statistics need at least two values per channel")
    mean = ops.channel_mean(x)
    std = ops.channel_std(x, layer.eps)
    out = ops.normalize_affine(x, mean, std, layer.scale, layer.shift)
    if mode == "train":
        m = layer.momentum
        dt = layer.running_mean.dtype
        layer.running_mean = ((1 - m) * layer.running_mean + m * mean.data).astype(dt)
        layer.running_std = ((1 - m) * layer.running_std + m * std.data).astype(dt)
    return out, BatchStats(mean, std)
