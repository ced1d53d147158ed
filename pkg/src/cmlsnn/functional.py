"""Differentiable ops recorded on a :class:`~cmlsnn.autodiff.Tape`."""

from __future__ import annotations

import numpy as np

from . import tensor as tc
from .autodiff import Var


def conv2d(x: Var, weight: Var, stride=1, pad=0, bias: Var | None = None) -> Var:
    out, cols = tc.conv2d(x.data, weight.data, stride, pad,
                          None if bias is None else bias.data, return_cols=True)

    def back(g, ctx):
        gx, gw, gb = tc.conv2d_backward(g, cols, x.data.shape, weight.data, stride, pad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return x.tape.record("conv2d", inputs, out, back, {"stride": stride, "pad": pad})


def batchnorm(x: Var, gamma: Var, beta: Var, running_mean, running_var, train=True) -> Var:
    out, cache = tc.batchnorm_forward(x.data, gamma.data, beta.data, running_mean, running_var, train)

    def back(g, ctx):
        return tc.batchnorm_backward(g, cache)

    return x.tape.record("batchnorm", (x, gamma, beta), out, back, {"cache": cache})


def maxpool(x: Var, spec: tc.PoolSpec) -> Var:
    out, argmax = tc.maxpool_forward(x.data, spec)
    shape = x.data.shape

    def back(g, ctx):
        return (tc.maxpool_backward(g, argmax, shape, spec),)

    return x.tape.record("maxpool", (x,), out, back, {"argmax": argmax, "spec": spec})


def avgpool(x: Var, spec: tc.PoolSpec) -> Var:
    out = tc.avgpool_forward(x.data, spec)
    shape = x.data.shape

    def back(g, ctx):
        return (tc.avgpool_backward(g, shape, spec),)

    return x.tape.record("avgpool", (x,), out, back, {"spec": spec})


def add(a: Var, b: Var) -> Var:
    return a.tape.record("add", (a, b), a.data + b.data, lambda g, ctx: (g, g))


def mul(a: Var, b: Var) -> Var:
    return a.tape.record("mul", (a, b), a.data * b.data, lambda g, ctx: (g * b.data, g * a.data))


def scale(x: Var, factor: float) -> Var:
    f = x.data.dtype.type(factor)
    return x.tape.record("scale", (x,), x.data * f, lambda g, ctx: (g * f,))


def total(x: Var) -> Var:
    """Sum of all elements, as a 0-d array."""
    shape = x.data.shape
    return x.tape.record("sum", (x,), np.asarray(x.data.sum()),
                         lambda g, ctx: (np.broadcast_to(g, shape).copy(),))


def detach(x: Var) -> Var:
    """Same value, no gradient path back to ``x``."""
    return x.tape._append("detach", (x,), x.data, None, {}, False, None)


def repeat_time(x: Var, steps: int) -> Var:
    """Replicate a ``(B, C, H, W)`` image, or a ``(1, B, C, H, W)`` map, across ``steps`` time steps."""
    single = x.data.ndim == 5
    if single and x.data.shape[0] != 1:
        raise tc.ShapeError(f"repeat_time needs a single time step, got shape {x.data.shape}")
    base = x.data[0] if single else x.data
    out = np.ascontiguousarray(np.broadcast_to(base, (steps,) + base.shape))
    return x.tape.record("repeat_time", (x,), out, lambda g, ctx: (g.sum(axis=0, keepdims=single),))


def add_time_axis(x: Var) -> Var:
    """``(B, C, H, W)`` to ``(1, B, C, H, W)``."""
    return x.tape.record("add_time_axis", (x,), x.data[None], lambda g, ctx: (g[0],))


def spatial_mean(x: Var) -> Var:
    """``(T, B, C, H, W)`` to ``(T, B, C)``."""
    h, w = x.data.shape[3:]
    out = x.data.mean(axis=(3, 4))
    inv = x.data.dtype.type(1.0 / (h * w))

    def back(g, ctx):
        return (np.broadcast_to((g * inv)[..., None, None], x.data.shape).copy(),)

    return x.tape.record("spatial_mean", (x,), out, back)


def linear(x: Var, weight: Var, bias: Var) -> Var:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (K, C)."""
    out = x.data @ weight.data.T + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def back(g, ctx):
        gx = g @ weight.data
        gw = np.tensordot(g, x.data, axes=(lead, lead))
        return gx, gw, g.sum(axis=lead)

    return x.tape.record("linear", (x, weight, bias), out, back)


def time_mean(x: Var) -> Var:
    steps = x.data.shape[0]
    inv = x.data.dtype.type(1.0 / steps)

    def back(g, ctx):
        return (np.broadcast_to(g * inv, x.data.shape).copy(),)

    return x.tape.record("time_mean", (x,), x.data.mean(axis=0), back)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Var, labels) -> Var:
    """Mean cross-entropy of ``(B, K)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.data.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def back(g, ctx):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return logits.tape.record("cross_entropy", (logits,), np.asarray(loss, dtype=logits.data.dtype), back)
