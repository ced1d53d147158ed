"""Pure-numpy reference kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Arrays are 4-D ``(N, C, H, W)`` for spatial kernels and 2-D
``(T, M)`` for the LIF kernels; dtype is float32 or float64 and is preserved.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride):
    # (N, C, OH, OW, kh, kw) read-only view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(x, kh, kw, stride)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        xp = xp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(xp)


def maxpool_fwd(x, k, stride):
    win = _windows(x, k, k, stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, k * k)
    # np.argmax returns the first maximal index: row-major first on ties
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_bwd(gout, idx, in_shape, k, stride):
    n, c, oh, ow = gout.shape
    gin = np.zeros(in_shape, dtype=gout.dtype)
    rows = np.arange(oh)[:, None] * stride + idx // k
    cols = np.arange(ow)[None, :] * stride + idx % k
    nn_ = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gin, (nn_, cc, rows, cols), gout)
    return gin


def avgpool_fwd(x, k, stride):
    win = _windows(x, k, k, stride)
    return np.ascontiguousarray(win.mean(axis=(-2, -1), dtype=x.dtype))


def avgpool_bwd(gout, in_shape, k, stride):
    n, c, oh, ow = gout.shape
    gin = np.zeros(in_shape, dtype=gout.dtype)
    share = gout / gout.dtype.type(k * k)
    for i in range(k):
        for j in range(k):
            gin[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
    return gin


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lif_fwd(x, tau, v_th, v_reset, soft, alpha):
    """Multistep hard-reset LIF over the leading time axis of ``x`` (T, M)."""
    steps, m = x.shape
    dt = x.dtype.type
    h = np.empty_like(x)
    s = np.empty_like(x)
    v = np.empty_like(x)
    v_prev = np.full(m, v_reset, dtype=x.dtype)
    inv_tau = dt(1.0 / tau)
    for t in range(steps):
        ht = v_prev + inv_tau * (x[t] - (v_prev - dt(v_reset)))
        if soft:
            st = _sigmoid(dt(alpha) * (ht - dt(v_th))).astype(x.dtype)
        else:
            st = (ht >= dt(v_th)).astype(x.dtype)
        vt = ht * (1 - st) + dt(v_reset) * st
        h[t], s[t], v[t] = ht, st, vt
        v_prev = vt
    return s, h, v


def lif_bwd(gs, h, v, s, tau, v_th, v_reset, alpha, full_bptt, soft, membrane_arg):
    dt = gs.dtype.type
    if membrane_arg and not soft:
        arg = h - v
    else:
        arg = h - dt(v_th)
    # e / (1 + e)^2 with e = exp(-|z|) stays accurate in the tails
    e = np.exp(-np.abs(dt(alpha) * arg))
    sg = (dt(alpha) * e / ((1 + e) * (1 + e))).astype(gs.dtype)
    inv_tau = dt(1.0 / tau)
    if not full_bptt:
        # zero incoming gradient gives exactly zero, even where the surrogate is not finite
        return np.where(gs == 0, dt(0), gs * sg * inv_tau)
    steps = gs.shape[0]
    gx = np.empty_like(gs)
    gv = np.zeros_like(gs[0])
    decay = dt(1.0 - 1.0 / tau)
    for t in range(steps - 1, -1, -1):
        dv_dh = (1 - s[t]) + (dt(v_reset) - h[t]) * sg[t]
        gh = gs[t] * sg[t] + gv * dv_dh
        gx[t] = gh * inv_tau
        gv = gh * decay
    return gx
