"""Central finite-difference checks against the tape's gradients."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .autodiff import SurrogateConfig, Tape, soft_forward_mode
from .layers import ConvBN, LifParams
from .model import SpikingClassifier
from .tensor import PoolSpec

FD_EPS = 1e-5
FD_TOL = 1e-6


def rel_error(analytic, numeric):
    """``|a - n| / max(1, |a|, |n|)`` elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def central_difference(f, array, coords, eps=FD_EPS):
    """Perturb ``array`` in place at each flat index in ``coords``; restores it."""
    flat = array.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def _coords(rng, size, n):
    return np.arange(size) if size <= n else np.sort(rng.choice(size, n, replace=False))


def check_network(seed=0, variant="cml", soft=True, eps=FD_EPS, coords_per_array=12,
                  timesteps=2, image=(2, 8, 8), batch=3, n_classes=3, widths=(3, 4)):
    """Max relative FD error over parameters and input of a 2-cell classifier.

    The LIF cells run with full BPTT so the backward covers the temporal
    dependence the soft forward actually has.
    """
    rng = np.random.default_rng(seed)
    model = SpikingClassifier(image[0], n_classes, variant, timesteps, widths,
                              lif_params=LifParams(), surrogate=SurrogateConfig(),
                              full_bptt=True, seed=seed, dtype=np.float64)
    # scale so pre-activations straddle threshold
    for cell in model.cells:
        cell.convbn.gamma[:] = rng.uniform(0.8, 1.6, size=cell.convbn.gamma.shape)
        cell.convbn.beta[:] = rng.uniform(0.8, 1.6, size=cell.convbn.beta.shape)
    model.head_weight[:] = rng.normal(0, 1.0, size=model.head_weight.shape)
    x = rng.normal(0, 1, size=(batch,) + tuple(image))
    labels = rng.integers(0, n_classes, size=batch)
    buffers = [b.copy() for b in model.buffers()]

    def loss_and_tape():
        for b, saved in zip(model.buffers(), buffers):
            b[...] = saved
        tape = Tape()
        xv = tape.leaf(x, name="input")
        with soft_forward_mode(soft):
            loss = F.cross_entropy(model.forward_var(xv), labels)
        return loss, tape, xv

    loss, tape, xv = loss_and_tape()
    tape.backward(loss)
    analytic = [(x, xv.grad)] + [(p, tape.grad_of(p)) for p in model.parameters()]

    def f():
        return float(loss_and_tape()[0].data)

    worst = 0.0
    for arr, grad in analytic:
        idx = _coords(rng, arr.size, coords_per_array)
        num = central_difference(f, arr, idx, eps)
        worst = max(worst, float(rel_error(grad.reshape(-1)[idx], num).max()))
    return worst


def check_smooth_graph(seed=0, eps=FD_EPS, coords=20):
    """ConvBN -> MaxPool -> AvgPool -> sum, no spike nodes."""
    rng = np.random.default_rng(seed)
    layer = ConvBN(2, 3, 3, rng=rng, dtype=np.float64)
    layer.gamma[:] = rng.uniform(0.5, 1.5, 3)
    layer.beta[:] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 2, 8, 8))
    w = rng.normal(size=(2, 2, 3, 2, 2))

    def run():
        tape = Tape()
        xv = tape.leaf(x)
        y = F.maxpool(layer(xv), PoolSpec(2))
        y = F.avgpool(y, PoolSpec(2))
        loss = F.total(F.mul(y, tape.constant(w)))
        return loss, tape, xv

    loss, tape, xv = run()
    tape.backward(loss)
    worst = 0.0
    for arr, grad in [(x, xv.grad)] + [(p, tape.grad_of(p)) for p in layer.parameters()]:
        idx = _coords(rng, arr.size, coords)
        num = central_difference(lambda: float(run()[0].data), arr, idx, eps)
        worst = max(worst, float(rel_error(grad.reshape(-1)[idx], num).max()))
    return worst
