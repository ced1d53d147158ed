# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; signatures mirror ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, fabs, fabsf

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride) noexcept nogil:
    # first output index whose input coordinate o*stride + off - pad is >= 0
    cdef Py_ssize_t need = pad - off
    if need <= 0:
        return 0
    return (need + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride,
                           Py_ssize_t size, Py_ssize_t n_out) noexcept nogil:
    # one past the last output index whose input coordinate is < size
    cdef Py_ssize_t last = size - 1 + pad - off
    if last < 0:
        return 0
    last = last // stride + 1
    return last if last < n_out else n_out


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c * kh * kw, oh * ow), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, iy, y0, y1, x0, x1
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    y0 = _lo(i, pad, stride)
                    y1 = _hi(i, pad, stride, h, oh)
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        x0 = _lo(j, pad, stride)
                        x1 = _hi(j, pad, stride, w, ow)
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            for ox in range(x0, x1):
                                cols[b, row, oy * ow + ox] = x[b, ch, iy, ox * stride + j - pad]
    return out


def col2im(real[:, :, ::1] cols, shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, iy, y0, y1, x0, x1
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    y0 = _lo(i, pad, stride)
                    y1 = _hi(i, pad, stride, h, oh)
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        x0 = _lo(j, pad, stride)
                        x1 = _hi(j, pad, stride, w, ow)
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            for ox in range(x0, x1):
                                x[b, ch, iy, ox * stride + j - pad] += cols[b, row, oy * ow + ox]
    return out


def maxpool_fwd(real[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j, best_i
    cdef real best, val
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        best = x[b, ch, oy * stride, ox * stride]
                        best_i = 0
                        # strict '>' keeps the row-major first maximum
                        for i in range(k):
                            for j in range(k):
                                val = x[b, ch, oy * stride + i, ox * stride + j]
                                if val > best:
                                    best = val
                                    best_i = i * k + j
                        out[b, ch, oy, ox] = best
                        idx[b, ch, oy, ox] = best_i
    return out_arr, idx_arr


def maxpool_bwd(real[:, :, :, ::1] gout, cnp.int64_t[:, :, :, ::1] idx, in_shape, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1], oh = gout.shape[2], ow = gout.shape[3]
    dtype = np.float32 if real is float else np.float64
    gin_arr = np.zeros(tuple(in_shape), dtype=dtype)
    cdef real[:, :, :, ::1] gin = gin_arr
    cdef Py_ssize_t b, ch, oy, ox, off
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        off = idx[b, ch, oy, ox]
                        gin[b, ch, oy * stride + off // k, ox * stride + off % k] += gout[b, ch, oy, ox]
    return gin_arr


def avgpool_fwd(real[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j
    cdef real acc
    cdef real inv = <real>1.0 / <real>(k * k)
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        acc = 0
                        for i in range(k):
                            for j in range(k):
                                acc = acc + x[b, ch, oy * stride + i, ox * stride + j]
                        out[b, ch, oy, ox] = acc * inv
    return out_arr


def avgpool_bwd(real[:, :, :, ::1] gout, in_shape, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1], oh = gout.shape[2], ow = gout.shape[3]
    dtype = np.float32 if real is float else np.float64
    gin_arr = np.zeros(tuple(in_shape), dtype=dtype)
    cdef real[:, :, :, ::1] gin = gin_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j
    cdef real share
    cdef real kk = <real>(k * k)
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        share = gout[b, ch, oy, ox] / kk
                        for i in range(k):
                            for j in range(k):
                                gin[b, ch, oy * stride + i, ox * stride + j] += share
    return gin_arr


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef inline real _surrogate(real alpha, real arg) noexcept nogil:
    # alpha * sig * (1 - sig) == alpha * e / (1 + e)^2 with e = exp(-|alpha * arg|)
    cdef real e
    if real is float:
        e = expf(-fabsf(alpha * arg))
    else:
        e = exp(-fabs(alpha * arg))
    return alpha * e / ((1 + e) * (1 + e))


def lif_fwd(real[:, ::1] x, double tau, double v_th, double v_reset, bint soft, double alpha):
    cdef Py_ssize_t steps = x.shape[0], m = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    s_arr = np.empty((steps, m), dtype=dtype)
    h_arr = np.empty((steps, m), dtype=dtype)
    v_arr = np.empty((steps, m), dtype=dtype)
    vp_arr = np.full(m, v_reset, dtype=dtype)
    cdef real[:, ::1] s = s_arr
    cdef real[:, ::1] h = h_arr
    cdef real[:, ::1] v = v_arr
    cdef real[::1] vp = vp_arr
    cdef real inv_tau = <real>(1.0 / tau)
    cdef real vth = <real>v_th
    cdef real vr = <real>v_reset
    cdef real ht, st
    cdef Py_ssize_t t, i
    with nogil:
        for t in range(steps):
            for i in range(m):
                ht = vp[i] + inv_tau * (x[t, i] - (vp[i] - vr))
                if soft:
                    st = <real>_sigmoid(alpha * <double>(ht - vth))
                else:
                    st = 1 if ht - vth >= 0 else 0
                vp[i] = ht * (1 - st) + vr * st
                h[t, i] = ht
                s[t, i] = st
                v[t, i] = vp[i]
    return s_arr, h_arr, v_arr


def lif_bwd(real[:, ::1] gs, real[:, ::1] h, real[:, ::1] v, real[:, ::1] s,
            double tau, double v_th, double v_reset, double alpha,
            bint full_bptt, bint soft, bint membrane_arg):
    cdef Py_ssize_t steps = gs.shape[0], m = gs.shape[1]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((steps, m), dtype=dtype)
    gv_arr = np.zeros(m, dtype=dtype)
    sg_arr = np.empty(m, dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef real[::1] gv = gv_arr
    cdef real[::1] sg = sg_arr
    cdef real inv_tau = <real>(1.0 / tau)
    cdef real decay = <real>(1.0 - 1.0 / tau)
    cdef real vth = <real>v_th
    cdef real vr = <real>v_reset
    cdef real ralpha = <real>alpha
    cdef bint use_v = membrane_arg and not soft
    cdef real gh, g
    cdef Py_ssize_t t, i
    with nogil:
        if not full_bptt:
            # no temporal chain: skip the exp wherever no gradient arrives
            # (three quarters of a 2x2 max-pool's inputs)
            for t in range(steps):
                for i in range(m):
                    g = gs[t, i]
                    if g == 0:
                        gx[t, i] = 0
                    elif use_v:
                        gx[t, i] = g * _surrogate(ralpha, h[t, i] - v[t, i]) * inv_tau
                    else:
                        gx[t, i] = g * _surrogate(ralpha, h[t, i] - vth) * inv_tau
        else:
            for t in range(steps - 1, -1, -1):
                # surrogate pass kept branch-free so it vectorizes
                if use_v:
                    for i in range(m):
                        sg[i] = _surrogate(ralpha, h[t, i] - v[t, i])
                else:
                    for i in range(m):
                        sg[i] = _surrogate(ralpha, h[t, i] - vth)
                for i in range(m):
                    gh = gs[t, i] * sg[i] + gv[i] * ((1 - s[t, i]) + (vr - h[t, i]) * sg[i])
                    gv[i] = gh * decay
                    gx[t, i] = gh * inv_tau
    return gx_arr
