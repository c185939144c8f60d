"""Differentiable primitives.

Every op takes Tensors (plain arrays and scalars are promoted as constants),
computes the forward value with numpy or the conv kernels, and registers a
closure returning one gradient per input.
"""
import numpy as np

from .. import kernels
from ..errors import RejectedInputError
from .tensor import Tensor, as_tensor, make_node

PRED_CLAMP = 1e-7
BN_EPS = 1e-5


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _const(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a = as_tensor(a)
    b = _const(b, a)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    b = _const(b, a)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_node(a.data * b.data, (a, b), backward)


def div(a, b):
    a = as_tensor(a)
    b = _const(b, a)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), backward)


def sum_all(x):
    x = as_tensor(x)
    return make_node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x):
    x = as_tensor(x)
    n = x.size
    return make_node(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x, shape):
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis)) if t.requires_grad else None
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:])
        )

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ------------------------------------------------------------- convolution

def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of an NCHW batch with an OIKK kernel bank."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise RejectedInputError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise RejectedInputError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    if kh != kw or kh % 2 == 0:
        raise RejectedInputError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise RejectedInputError(f"conv2d bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1 or padding < 0:
        raise RejectedInputError(f"conv2d stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise RejectedInputError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape[2:]}")

    out = kernels.conv2d_forward(x.data, kernel.data.astype(x.dtype, copy=False),
                                 bias.data.astype(x.dtype, copy=False), stride, padding)

    def backward(g):
        gx = kernels.conv2d_backward_input(g, kernel.data, x.shape, stride, padding) if x.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = kernels.conv2d_backward_weight(g, x.data, kernel.shape, stride, padding).astype(kernel.dtype)
        gb = g.sum(axis=(0, 2, 3)).astype(bias.dtype) if bias.requires_grad else None
        return gx, gk, gb

    return make_node(out, (x, kernel, bias), backward)


# ---------------------------------------------------------- normalization

def channel_mean(x):
    """Per-channel mean over (N, H, W) of an NCHW tensor; shape (C,)."""
    x = as_tensor(x)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to((g / count)[None, :, None, None], x.shape).astype(x.dtype),)

    return make_node(x.data.mean(axis=(0, 2, 3)), (x,), backward)


def channel_std(x, eps=BN_EPS):
    """Per-channel sqrt(biased variance + eps) over (N, H, W); shape (C,)."""
    x = as_tensor(x)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    centered = x.data - x.data.mean(axis=(0, 2, 3), keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=(0, 2, 3)) + eps)

    def backward(g):
        # the mean's own dependence on x drops out because centered sums to 0
        scale = (g / (count * std))[None, :, None, None]
        return ((centered * scale).astype(x.dtype),)

    return make_node(std.astype(x.dtype), (x,), backward)


def normalize_affine(x, mean, std, scale, shift):
    """(x - mean) / std * scale + shift with per-channel (C,) parameters."""
    x, mean, std = as_tensor(x), _const(mean, x), _const(std, x)
    scale, shift = _const(scale, x), _const(shift, x)
    m = mean.data[None, :, None, None]
    s = std.data[None, :, None, None]
    a = scale.data[None, :, None, None]
    xhat = (x.data - m) / s
    out = xhat * a + shift.data[None, :, None, None]

    def backward(g):
        gxhat = g * a
        gx = (gxhat / s) if x.requires_grad else None
        gm = (-(gxhat.sum(axis=(0, 2, 3))) / std.data) if mean.requires_grad else None
        gs = (-(gxhat * xhat).sum(axis=(0, 2, 3)) / std.data) if std.requires_grad else None
        ga = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        return gx, gm, gs, ga, gb

    return make_node(out.astype(x.dtype, copy=False), (x, mean, std, scale, shift), backward)


# ---------------------------------------------------------------- pointwise

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise RejectedInputError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- resampling

def down2_avg(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise RejectedInputError(f"down2_avg needs even spatial size, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return make_node(out, (x,), backward)


def up2_nearest(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), backward)


def resample(x, kind):
    if kind == "down2_avg":
        return down2_avg(x)
    if kind == "up2_nearest":
        return up2_nearest(x)
    raise RejectedInputError(f"unknown resample kind {kind!r}")


# -------------------------------------------------------------------- losses

def l1_distance(a, b):
    """Mean absolute difference; the subgradient at ties is 0."""
    a = as_tensor(a)
    b = _const(b, a)
    if a.shape != b.shape:
        raise RejectedInputError(f"l1_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        sg = np.sign(diff) * (g / n)
        return (sg if a.requires_grad else None, -sg if b.requires_grad else None)

    return make_node(np.abs(diff).mean(), (a, b), backward)


def binary_cross_entropy(pred, target):
    """Mean of -(y log p + (1-y) log(1-p)) with p clamped to [1e-7, 1-1e-7]."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise RejectedInputError(f"binary_cross_entropy shape mismatch: {pred.shape} vs {target.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise RejectedInputError("binary_cross_entropy target must contain only 0 and 1")
    y = target.astype(pred.dtype)
    p = np.clip(pred.data, PRED_CLAMP, 1.0 - PRED_CLAMP)
    n = p.size
    loss = -(y * np.log(p) + (1 - y) * np.log1p(-p)).mean()
    inside = (pred.data >= PRED_CLAMP) & (pred.data <= 1.0 - PRED_CLAMP)

    def backward(g):
        dp = (p - y) / (p * (1 - p)) * (g / n)
        return (np.where(inside, dp, 0).astype(pred.dtype),)

    return make_node(np.asarray(loss, dtype=pred.dtype), (pred,), backward)
