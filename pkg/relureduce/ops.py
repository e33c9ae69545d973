"""relureduce/ops.py

Batched numpy kernels for every layer kind, NCHW layout.
Each `*_backward(out_grad, x, ...)` returns the gradients in forward-argument order.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "conv2d_forward",
    "conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu_forward",
    "relu_backward",
    "maxpool_forward",
    "maxpool_backward",
    "avgpool_forward",
    "avgpool_backward",
    "linear_forward",
    "linear_backward",
    "flatten_forward",
    "flatten_backward",
    "add_forward",
    "add_backward",
    "batch_statistics",
]

# 3rd party
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, Ho, Wo, k, k) read-only view"""
    return sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _col2im(cols: np.ndarray, padded_shape: tuple, kernel: int, stride: int) -> np.ndarray:
    """Scatter-add (N, C, Ho, Wo, k, k) window gradients back onto the padded input"""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    ho, wo = cols.shape[2:4]
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j]
    return out


def _unpad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


# convolution


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> np.ndarray:
    """weight: (O, C/groups, k, k)"""
    n, c = x.shape[:2]
    o, cg, k, _ = weight.shape
    win = _windows(_pad(x, padding), k, stride)
    ho, wo = win.shape[2:4]
    win = win.reshape(n, groups, cg, ho, wo, k, k)
    w = weight.reshape(groups, o // groups, cg, k, k)
    out = np.einsum("ngchwij,gocij->ngohw", win, w, optimize=True).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def conv2d_backward(
    out_grad: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    n, c = x.shape[:2]
    o, cg, k, _ = weight.shape
    xp = _pad(x, padding)
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2:4]
    win = win.reshape(n, groups, cg, ho, wo, k, k)
    g_out = out_grad.reshape(n, groups, o // groups, ho, wo)
    w = weight.reshape(groups, o // groups, cg, k, k)

    d_weight = np.einsum("ngohw,ngchwij->gocij", g_out, win, optimize=True).reshape(weight.shape)
    d_cols = np.einsum("ngohw,gocij->ngchwij", g_out, w, optimize=True).reshape(n, c, ho, wo, k, k)
    d_x = _unpad(_col2im(d_cols, xp.shape, k, stride), padding)
    d_bias = out_grad.sum(axis=(0, 2, 3)) if bias is not None else None
    return d_x, d_weight, d_bias


# batch normalization


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :, None, None] if ndim == 4 else v[None, :]


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize with the given statistics. The caller decides whether these are batch
    statistics (training) or running statistics (inference).
    """
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_bcast(mean, x.ndim)) * _bn_bcast(inv_std, x.ndim)
    return xhat * _bn_bcast(gamma, x.ndim) + _bn_bcast(beta, x.ndim)


def batch_statistics(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance"""
    axes = _bn_axes(x)
    return x.mean(axis=axes), x.var(axis=axes)


def batchnorm_backward(
    out_grad: np.ndarray,
    x: np.ndarray,
    gamma: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
    batch_stats: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """With `batch_stats` the dependency of mean and var on x is differentiated too"""
    axes = _bn_axes(x)
    nd = x.ndim
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_bcast(mean, nd)) * _bn_bcast(inv_std, nd)
    d_gamma = (out_grad * xhat).sum(axis=axes)
    d_beta = out_grad.sum(axis=axes)
    d_xhat = out_grad * _bn_bcast(gamma, nd)
    if not batch_stats:
        return d_xhat * _bn_bcast(inv_std, nd), d_gamma, d_beta
    m = x.size // x.shape[1]
    d_x = (
        _bn_bcast(inv_std / m, nd)
        * (m * d_xhat - _bn_bcast(d_xhat.sum(axis=axes), nd) - xhat * _bn_bcast((d_xhat * xhat).sum(axis=axes), nd))
    )
    return d_x, d_gamma, d_beta


# activations, pooling, reshaping


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(out_grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return out_grad * (x > 0)


def maxpool_forward(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    return _windows(x, kernel, stride).max(axis=(4, 5))


def maxpool_backward(out_grad: np.ndarray, x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    win = _windows(x, kernel, stride)
    n, c, ho, wo = win.shape[:4]
    winner = win.reshape(n, c, ho, wo, kernel * kernel).argmax(axis=-1)
    # first maximum of each window takes the whole gradient
    cols = np.zeros(win.shape, dtype=out_grad.dtype)
    cols.reshape(n, c, ho, wo, kernel * kernel)[...] = (
        np.arange(kernel * kernel) == winner[..., None]
    ) * out_grad[..., None]
    return _col2im(cols, x.shape, kernel, stride)


def avgpool_forward(x: np.ndarray, kernel: int, stride: int, global_pool: bool = False) -> np.ndarray:
    if global_pool:
        return x.mean(axis=(2, 3), keepdims=True)
    return _windows(x, kernel, stride).mean(axis=(4, 5))


def avgpool_backward(out_grad: np.ndarray, x: np.ndarray, kernel: int, stride: int, global_pool: bool = False) -> np.ndarray:
    if global_pool:
        h, w = x.shape[2:]
        return np.broadcast_to(out_grad / (h * w), x.shape).copy()
    cols = np.broadcast_to(out_grad[..., None, None] / (kernel * kernel), out_grad.shape + (kernel, kernel))
    return _col2im(cols, x.shape, kernel, stride)


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """weight: (out_features, in_features)"""
    out = x @ weight.T
    return out + bias if bias is not None else out


def linear_backward(
    out_grad: np.ndarray, x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    return out_grad @ weight, out_grad.T @ x, out_grad.sum(axis=0) if bias is not None else None


def flatten_forward(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def flatten_backward(out_grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return out_grad.reshape(x.shape)


def add_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a + b


def add_backward(out_grad: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return out_grad, out_grad
