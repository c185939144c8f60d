"""Mini U-shape segmentation network with inspectable batch-norm state."""
import copy
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import _binary
from .engine import ops
from .engine.batchnorm import BnLayerState, batchnorm_apply
from .engine.tensor import Tensor, as_tensor
from .errors import BadMagicError, FormatError, RejectedInputError, TruncatedFileError, VersionError

MODEL_MAGIC = b"PSFD"
MODEL_VERSION = 1
MAX_DEPTH = 12


@dataclass(frozen=True)
class SegModelConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    num_classes: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 2:
            raise RejectedInputError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 2:
            raise RejectedInputError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.in_channels < 1 or self.num_classes < 1:
            raise RejectedInputError("in_channels and num_classes must be positive")
        if self.depth > MAX_DEPTH:
            raise RejectedInputError(f"depth must be <= {MAX_DEPTH}, got {self.depth}")
        if not 0.0 < self.bn_momentum < 1.0 or not 0.0 < self.bn_eps < 1.0:
            raise RejectedInputError("bn_momentum must be in (0, 1) and bn_eps positive")

    @property
    def spatial_divisor(self):
        return 2 ** (self.depth - 1)

    def level_channels(self, level):
        return self.base_channels * 2 ** level

    def block_layout(self):
        """(in, out) channels per conv block: encoder levels then decoder."""
        layout = []
        c_prev = self.in_channels
        for level in range(self.depth):
            c = self.level_channels(level)
            layout.append((c_prev, c))
            c_prev = c
        for level in range(self.depth - 2, -1, -1):
            c = self.level_channels(level)
            layout.append((c_prev + c, c))
            c_prev = c
        return layout

    @property
    def bn_layer_count(self):
        return 2 * len(self.block_layout())


@dataclass
class BnSnapshot:
    running_mean: list
    running_std: list


@dataclass
class ForwardResult:
    probs: Tensor
    bottleneck: Tensor
    stats: list

    def __iter__(self):
        return iter((self.probs, self.bottleneck, self.stats))


class SegModel:
    """Encoder-decoder with two conv-BN-ReLU layers per block.

    ``convs[i]`` feeds ``bns[i]``; the head is a 1x1 conv plus sigmoid per
    class. The output of the deepest encoder block is the bottleneck tap.
    """

    def __init__(self, config, convs, bns, head):
        self.config = config
        self.convs = convs
        self.bns = bns
        self.head = head

    @property
    def dtype(self):
        return self.head[0].dtype

    def parameters(self):
        params = []
        for (kernel, bias), bn in zip(self.convs, self.bns):
            params.extend([kernel, bias, bn.scale, bn.shift])
        params.extend(self.head)
        return params

    def set_trainable(self, flag):
        for p in self.parameters():
            p.set_requires_grad(flag)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        clone = self.copy()
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = np.zeros_like(p.data)
        for bn in clone.bns:
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_std = bn.running_std.astype(dtype)
        return clone

    # ------------------------------------------------------------- forward
    def _layer(self, x, idx, mode, stats):
        kernel, bias = self.convs[idx]
        x = ops.conv2d(x, kernel, bias, stride=1, padding=kernel.shape[2] // 2)
        x, st = batchnorm_apply(x, self.bns[idx], mode)
        stats.append(st)
        return ops.relu(x)

    def _block(self, x, block, mode, stats):
        x = self._layer(x, 2 * block, mode, stats)
        return self._layer(x, 2 * block + 1, mode, stats)

    def forward(self, batch, mode="eval"):
        """Returns ``ForwardResult(probs, bottleneck, stats)``.

        ``stats`` holds one :class:`BatchStats` per BN layer in model order.
        ``stat_collect`` computes batch statistics exactly like ``train`` but
        leaves the running buffers untouched.
        """
        x = as_tensor(batch)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise RejectedInputError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        d = cfg.spatial_divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise RejectedInputError(f"spatial size {x.shape[2:]} not divisible by {d}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype)) if not x.requires_grad else x
        if mode not in ("train", "eval", "stat_collect"):
            raise RejectedInputError(f"unknown forward mode {mode!r}")

        stats, skips = [], []
        block = 0
        for level in range(cfg.depth):
            x = self._block(x, block, mode, stats)
            block += 1
            if level < cfg.depth - 1:
                skips.append(x)
                x = ops.down2_avg(x)
        bottleneck = x
        for level in range(cfg.depth - 2, -1, -1):
            x = ops.concat([ops.up2_nearest(x), skips[level]], axis=1)
            x = self._block(x, block, mode, stats)
            block += 1
        logits = ops.conv2d(x, self.head[0], self.head[1], stride=1, padding=0)
        probs = ops.sigmoid(logits)
        return ForwardResult(probs, bottleneck, stats)

    __call__ = forward

    # ------------------------------------------------------------ BN state
    def bn_checkpoint(self, action, snap=None):
        """``snapshot`` -> BnSnapshot of running buffers; ``restore`` writes one back."""
        if action == "snapshot":
            return BnSnapshot([bn.running_mean.copy() for bn in self.bns],
                              [bn.running_std.copy() for bn in self.bns])
        if action == "restore":
            if snap is None or len(snap.running_mean) != len(self.bns):
                raise RejectedInputError("snapshot does not match this model's BN layer count")
            for bn, m, s in zip(self.bns, snap.running_mean, snap.running_std):
                if m.shape != (bn.channels,) or s.shape != (bn.channels,):
                    raise RejectedInputError("snapshot channel counts do not match this model")
            for bn, m, s in zip(self.bns, snap.running_mean, snap.running_std):
                bn.running_mean = m.copy()
                bn.running_std = s.copy()
            return None
        raise RejectedInputError(f"unknown bn_checkpoint action {action!r}")

    # -------------------------------------------------------- serialization
    def _records(self):
        out = []
        for (kernel, bias), bn in zip(self.convs, self.bns):
            out.extend([kernel.data, bias.data, bn.scale.data, bn.shift.data, bn.running_mean, bn.running_std])
        out.extend([self.head[0].data, self.head[1].data])
        return out

    def to_bytes(self):
        cfg = self.config
        head = MODEL_MAGIC + struct.pack("<H", MODEL_VERSION)
        head += struct.pack("<4I", cfg.in_channels, cfg.base_channels, cfg.depth, cfg.num_classes)
        head += struct.pack("<2d", cfg.bn_momentum, cfg.bn_eps)
        return head + b"".join(_binary.pack_array(a) for a in self._records())

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf, source="<bytes>"):
        r = _binary.Reader(buf, source)
        magic = r.take(4, "magic")
        if magic != MODEL_MAGIC:
            raise BadMagicError(f"{source}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        (version,) = r.unpack("<H", "version")
        if version != MODEL_VERSION:
            raise VersionError(f"{source}: unsupported model version {version}")
        ints = r.unpack("<4I", "config block")
        momentum, eps = r.unpack("<2d", "config block")
        try:
            cfg = SegModelConfig(*ints, bn_momentum=float(momentum), bn_eps=float(eps))
        except RejectedInputError as exc:
            raise FormatError(f"{source}: invalid config block ({exc})") from exc
        expected = record_shapes(cfg)
        # check the advertised size before allocating a template model
        need = sum(4 * (1 + len(shape)) + 4 * math.prod(shape) for shape in expected)
        if need > len(r.buf) - r.pos:
            raise TruncatedFileError(
                f"{source}: config implies {need} bytes of records but only {len(r.buf) - r.pos} remain"
            )
        template = build_model(cfg, seed=0)
        arrays = []
        for i, shape in enumerate(expected):
            arr = r.array(f"record {i}")
            if arr.shape != shape:
                raise FormatError(f"{source}: record {i} has shape {arr.shape}, expected {shape}")
            arrays.append(arr)
        if not r.at_end():
            raise FormatError(f"{source}: {len(r.buf) - r.pos} trailing bytes")
        it = iter(arrays)
        for (kernel, bias), bn in zip(template.convs, template.bns):
            kernel.data, bias.data = next(it), next(it)
            bn.scale.data, bn.shift.data = next(it), next(it)
            bn.running_mean, bn.running_std = next(it), next(it)
        template.head[0].data, template.head[1].data = next(it), next(it)
        template.zero_grad()
        return template

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), source=str(path))


def record_shapes(config):
    """Shapes of the serialized records, in file order."""
    shapes = []
    for c_in, c_out in config.block_layout():
        for layer_in in (c_in, c_out):
            shapes.extend([(c_out, layer_in, 3, 3), (c_out,), (c_out,), (c_out,), (c_out,), (c_out,)])
    shapes.extend([(config.num_classes, config.base_channels, 1, 1), (config.num_classes,)])
    return shapes


def build_model(config=None, seed=0, dtype=np.float32):
    """He-initialized kernels, zero biases, BN scale 1 / shift 0, running stats (0, 1)."""
    config = config or SegModelConfig()
    if not isinstance(config, SegModelConfig):
        raise RejectedInputError("build_model expects a SegModelConfig")
    rng = np.random.default_rng(seed)
    convs, bns = [], []

    def conv(c_in, c_out, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        kernel = Tensor((rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype), requires_grad=True)
        bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        return kernel, bias

    for c_in, c_out in config.block_layout():
        for layer_in in (c_in, c_out):
            convs.append(conv(layer_in, c_out, 3))
            bns.append(BnLayerState(c_out, momentum=config.bn_momentum, eps=config.bn_eps, dtype=dtype))
    head = conv(config.base_channels, config.num_classes, 1)
    return SegModel(config, convs, bns, head)


def config_fields():
    return [f.name for f in fields(SegModelConfig)]
