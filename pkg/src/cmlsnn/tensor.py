"""Time-major tensors and the numeric kernels everything else builds on.

All spatial ops take 5-D arrays laid out ``(T, B, C, H, W)``.  Non-neuron ops
fold ``(T, B)`` into one batch axis; for C-contiguous input that fold is a
reshape view, never a copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

DTYPES = {"f32": np.float32, "f64": np.float64}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


def as_tensor5(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a time-major ``(T, B, C, H, W)`` array."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 5:
        raise ShapeError(f"expected a 5-D (T, B, C, H, W) tensor, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def fold_time(x: np.ndarray) -> np.ndarray:
    """View ``(T, B, C, H, W)`` as ``(T*B, C, H, W)``."""
    t, b = x.shape[:2]
    return x.reshape(t * b, *x.shape[2:])


def unfold_time(x: np.ndarray, steps: int) -> np.ndarray:
    """Inverse of :func:`fold_time`."""
    return x.reshape(steps, x.shape[0] // steps, *x.shape[1:])


@dataclass(frozen=True)
class PoolSpec:
    """Pooling geometry. ``window`` defaults to ``stride``; no padding."""

    stride: int
    window: int | None = None

    def __post_init__(self):
        if self.window is None:
            object.__setattr__(self, "window", self.stride)
        if self.stride < 1 or self.window < 1:
            raise ValueError(f"stride and window must be positive, got {self.stride}, {self.window}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s = self.window, self.stride
        if h < k or w < k:
            raise ShapeError(f"pool window {k} larger than input {h}x{w}")
        return (h - k) // s + 1, (w - k) // s + 1


def conv_output_hw(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {h}x{w}")
    return oh, ow


def conv2d(x, weight, stride=1, pad=0, bias=None, return_cols=False):
    """Cross-correlation of a 5-D input with ``weight`` of shape (Cout, Cin, kh, kw)."""
    x = as_tensor5(x)
    weight = np.asarray(weight, dtype=x.dtype)
    if weight.ndim != 4:
        raise ShapeError(f"conv weight must be (Cout, Cin, kh, kw), got {weight.shape}")
    steps, batch, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv weight expects {wcin} input channels, input has {cin}")
    oh, ow = conv_output_hw(h, w, kh, kw, stride, pad)
    cols = _kernels.im2col(fold_time(x), kh, kw, stride, pad)
    out = np.matmul(weight.reshape(cout, -1), cols)
    if bias is not None:
        out += np.asarray(bias, dtype=x.dtype)[:, None]
    out = out.reshape(steps, batch, cout, oh, ow)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(gout, cols, x_shape, weight, stride=1, pad=0):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d`."""
    steps, batch, cout, oh, ow = gout.shape
    kh, kw = weight.shape[2:]
    g = np.ascontiguousarray(gout).reshape(steps * batch, cout, oh * ow)
    wmat = weight.reshape(cout, -1)
    # batched matmul then a sum; avoids the transposed copies tensordot makes
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    dcols = np.ascontiguousarray(np.matmul(wmat.T, g))
    n4 = (steps * batch,) + tuple(x_shape[2:])
    grad_x = _kernels.col2im(dcols, n4, kh, kw, stride, pad).reshape(x_shape)
    grad_b = g.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


def maxpool_forward(x, spec: PoolSpec):
    """Window max plus argmax map.

    The argmax map holds, per output element, the flat row-major offset
    ``r * window + c`` of the first maximal element inside its window.
    """
    x = as_tensor5(x)
    steps, batch, c, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    out, idx = _kernels.maxpool_fwd(fold_time(x), spec.window, spec.stride)
    return out.reshape(steps, batch, c, oh, ow), idx.reshape(steps, batch, c, oh, ow)


def maxpool_backward(gout, argmax, x_shape, spec: PoolSpec):
    steps, batch = x_shape[:2]
    g = np.ascontiguousarray(gout)
    gin = _kernels.maxpool_bwd(
        fold_time(g), np.ascontiguousarray(fold_time(argmax), dtype=np.int64),
        (steps * batch,) + tuple(x_shape[2:]), spec.window, spec.stride,
    )
    return gin.reshape(x_shape)


def avgpool_forward(x, spec: PoolSpec):
    x = as_tensor5(x)
    steps, batch, c, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    out = _kernels.avgpool_fwd(fold_time(x), spec.window, spec.stride)
    return out.reshape(steps, batch, c, oh, ow)


def avgpool_backward(gout, x_shape, spec: PoolSpec):
    steps, batch = x_shape[:2]
    gin = _kernels.avgpool_bwd(
        fold_time(np.ascontiguousarray(gout)), (steps * batch,) + tuple(x_shape[2:]),
        spec.window, spec.stride,
    )
    return gin.reshape(x_shape)


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch norm over the (T*B, H, W) axes.

    In train mode ``running_mean``/``running_var`` are updated in place
    (running variance uses the unbiased batch estimate).
    """
    x = as_tensor5(x)
    c = x.shape[2]
    for name, p in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if np.shape(p) != (c,):
            raise ShapeError(f"{name} must have length C={c}, got shape {np.shape(p)}")
    count = x.shape[0] * x.shape[1] * x.shape[3] * x.shape[4]
    if count == 0:
        raise ShapeError("batch norm on an empty batch")
    axes = (0, 1, 3, 4)
    dt = x.dtype
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean = np.asarray(running_mean, dtype=dt)
        var = np.asarray(running_var, dtype=dt)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    shape = (1, 1, c, 1, 1)
    xhat = (x - mean.reshape(shape).astype(dt)) * inv_std.reshape(shape)
    g = np.asarray(gamma, dtype=dt).reshape(shape)
    y = xhat * g + np.asarray(beta, dtype=dt).reshape(shape)
    return y, BNCache(xhat, inv_std, np.asarray(gamma, dtype=dt), train)


def batchnorm_backward(gout, cache: BNCache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    axes = (0, 1, 3, 4)
    shape = (1, 1, -1, 1, 1)
    grad_beta = gout.sum(axis=axes)
    grad_gamma = (gout * cache.xhat).sum(axis=axes)
    gxhat = gout * cache.gamma.reshape(shape)
    inv_std = cache.inv_std.reshape(shape)
    if not cache.train:
        return gxhat * inv_std, grad_gamma, grad_beta
    n = gout.size // gout.shape[2]
    grad_x = inv_std / n * (
        n * gxhat
        - gxhat.sum(axis=axes, keepdims=True)
        - cache.xhat * (gxhat * cache.xhat).sum(axis=axes, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


def fold_batchnorm(weight, gamma, beta, running_mean, running_var, eps=BN_EPS):
    """Fold eval-mode batch norm into conv weights; returns ``(weight, bias)``."""
    scale = gamma / np.sqrt(running_var + eps)
    return weight * scale[:, None, None, None], beta - running_mean * scale
