"""Convolution kernels: numba loops and numpy equivalents.

Both paths compute the same cross-correlation; the public functions
dispatch on ``_accel.USE_NUMBA`` at call time. Arrays are NCHW, kernels
OIKK, and dtypes are preserved (float32 for training, float64 for checks).
"""
import numpy as np

from . import _accel
from ._accel import njit


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


# --------------------------------------------------------------------------
# numba path: operate on a zero-padded input so inner loops are branch-free
# and contiguous along the last axis for stride 1.

@njit(fastmath=True)
def _conv2d_forward_nb(xp, w, b, stride, out):
    n_batch, c_in = xp.shape[0], xp.shape[1]
    c_out, _, k, _ = w.shape
    ho, wo = out.shape[2], out.shape[3]
    for n in range(n_batch):
        for o in range(c_out):
            out[n, o, :, :] = b[o]
            for c in range(c_in):
                for ki in range(k):
                    for kj in range(k):
                        wv = w[o, c, ki, kj]
                        for i in range(ho):
                            row = xp[n, c, i * stride + ki]
                            orow = out[n, o, i]
                            if stride == 1:
                                for j in range(wo):
                                    orow[j] += wv * row[j + kj]
                            else:
                                for j in range(wo):
                                    orow[j] += wv * row[j * stride + kj]


@njit(fastmath=True)
def _conv2d_backward_input_nb(gout, w, stride, gxp):
    n_batch, c_in = gxp.shape[0], gxp.shape[1]
    c_out, _, k, _ = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    for n in range(n_batch):
        for c in range(c_in):
            for o in range(c_out):
                for ki in range(k):
                    for kj in range(k):
                        wv = w[o, c, ki, kj]
                        for i in range(ho):
                            grow = gout[n, o, i]
                            xrow = gxp[n, c, i * stride + ki]
                            if stride == 1:
                                for j in range(wo):
                                    xrow[j + kj] += wv * grow[j]
                            else:
                                for j in range(wo):
                                    xrow[j * stride + kj] += wv * grow[j]


@njit(fastmath=True)
def _conv2d_backward_weight_nb(gout, xp, stride, gw):
    n_batch, c_in = xp.shape[0], xp.shape[1]
    c_out, _, k, _ = gw.shape
    ho, wo = gout.shape[2], gout.shape[3]
    # lane-wise partial sums keep the inner loop a vectorizable multiply-add
    lanes = np.zeros(wo, dtype=gw.dtype)
    for o in range(c_out):
        for c in range(c_in):
            for ki in range(k):
                for kj in range(k):
                    lanes[:] = 0
                    for n in range(n_batch):
                        for i in range(ho):
                            grow = gout[n, o, i]
                            row = xp[n, c, i * stride + ki]
                            if stride == 1:
                                for j in range(wo):
                                    lanes[j] += grow[j] * row[j + kj]
                            else:
                                for j in range(wo):
                                    lanes[j] += grow[j] * row[j * stride + kj]
                    gw[o, c, ki, kj] = lanes.sum()


# --------------------------------------------------------------------------
# numpy path: one GEMM per kernel tap over a zero-padded copy

def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv2d_forward_np(x, w, b, stride, padding, out):
    k = w.shape[2]
    ho, wo = out.shape[2], out.shape[3]
    xp = _pad(x, padding)
    acc = np.zeros((x.shape[0], ho, wo, w.shape[0]), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
            # (N,C,Ho,Wo) x (O,C) -> (N,Ho,Wo,O)
            acc += np.tensordot(patch, w[:, :, ki, kj], axes=([1], [1]))
    out[...] = acc.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _conv2d_backward_input_np(gout, w, stride, padding, gx):
    n_batch, c_in, h, wd = gx.shape
    k = w.shape[2]
    ho, wo = gout.shape[2], gout.shape[3]
    gxp = np.zeros((n_batch, c_in, h + 2 * padding, wd + 2 * padding), dtype=gx.dtype)
    for ki in range(k):
        for kj in range(k):
            # (N,O,Ho,Wo) x (O,C) -> (N,Ho,Wo,C)
            contrib = np.tensordot(gout, w[:, :, ki, kj], axes=([1], [0]))
            gxp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    gx[...] = gxp[:, :, padding:padding + h, padding:padding + wd]


def _conv2d_backward_weight_np(gout, x, stride, padding, gw):
    k = gw.shape[2]
    ho, wo = gout.shape[2], gout.shape[3]
    xp = _pad(x, padding)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
            gw[:, :, ki, kj] = np.tensordot(gout, patch, axes=([0, 2, 3], [0, 2, 3]))


# --------------------------------------------------------------------------
# dispatch

def conv2d_forward(x, w, b, stride, padding):
    ho = conv_output_size(x.shape[2], w.shape[2], stride, padding)
    wo = conv_output_size(x.shape[3], w.shape[3], stride, padding)
    out = np.empty((x.shape[0], w.shape[0], ho, wo), dtype=x.dtype)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    b = np.ascontiguousarray(b, dtype=x.dtype)
    if _accel.USE_NUMBA:
        _conv2d_forward_nb(np.ascontiguousarray(_pad(x, padding)), w, b, stride, out)
    else:
        _conv2d_forward_np(x, w, b, stride, padding, out)
    return out


def conv2d_backward_input(gout, w, input_shape, stride, padding):
    gout = np.ascontiguousarray(gout)
    w = np.ascontiguousarray(w, dtype=gout.dtype)
    if _accel.USE_NUMBA:
        n, c, h, wd = input_shape
        gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=gout.dtype)
        _conv2d_backward_input_nb(gout, w, stride, gxp)
        return np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + wd])
    gx = np.zeros(input_shape, dtype=gout.dtype)
    _conv2d_backward_input_np(gout, w, stride, padding, gx)
    return gx


def conv2d_backward_weight(gout, x, kernel_shape, stride, padding):
    gw = np.zeros(kernel_shape, dtype=gout.dtype)
    gout = np.ascontiguousarray(gout)
    x = np.asarray(x, dtype=gout.dtype)
    if _accel.USE_NUMBA:
        _conv2d_backward_weight_nb(gout, np.ascontiguousarray(_pad(x, padding)), stride, gw)
    else:
        _conv2d_backward_weight_np(gout, x, stride, padding, gw)
    return gw
