"""Spiking neuron layers and the ConvBN compound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import functional as F
from . import tensor as tc
from .autodiff import SurrogateConfig, Var, soft_forward_enabled


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if not self.tau >= 1.0:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if not self.v_threshold > self.v_reset:
            raise ConfigError(
                f"v_threshold ({self.v_threshold}) must exceed v_reset ({self.v_reset})")


@dataclass
class LifState:
    """Membrane trace of one forward pass; every array is (T, ...)."""

    H: np.ndarray
    V: np.ndarray
    S: np.ndarray
    soft: bool = False


def multistep_lif_forward(X, params: LifParams = LifParams(), cfg: SurrogateConfig = SurrogateConfig(),
                          soft: bool | None = None):
    """Run hard-reset LIF dynamics over the leading time axis of ``X``.

    The membrane starts at ``v_reset`` on every call.  With ``soft`` (default:
    the ambient :func:`~cmlsnn.autodiff.soft_forward_mode`), spikes are
    ``sigmoid(alpha * (H - v_threshold))`` instead of a step.
    """
    if soft is None:
        soft = soft_forward_enabled()
    X = np.asarray(X)
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float32)
    if X.ndim < 1:
        raise tc.ShapeError("LIF input needs a leading time axis")
    shape = X.shape
    x2 = np.ascontiguousarray(X.reshape(shape[0], -1))
    s, h, v = _kernels.lif_fwd(x2, float(params.tau), float(params.v_threshold),
                               float(params.v_reset), bool(soft), float(cfg.alpha))
    s, h, v = (np.asarray(a).reshape(shape) for a in (s, h, v))
    return s, LifState(H=h, V=v, S=s, soft=bool(soft))


def multistep_lif_backward(grad_S, state: LifState, params: LifParams = LifParams(),
                           cfg: SurrogateConfig = SurrogateConfig(), full_bptt: bool = False):
    """Gradient of the spike train with respect to the input current.

    Default (reset detached, no temporal chain):
    ``grad_X[t] = grad_S[t] / tau * surrogate'(H[t] - v_threshold)``.
    ``full_bptt`` also backpropagates through ``V[t-1]`` and the reset.
    """
    grad_S = np.asarray(grad_S, dtype=state.H.dtype)
    if grad_S.shape != state.H.shape:
        raise tc.ShapeError(f"grad_S shape {grad_S.shape} != LIF state shape {state.H.shape}")
    shape = grad_S.shape
    flat = [np.ascontiguousarray(a.reshape(shape[0], -1)) for a in (grad_S, state.H, state.V, state.S)]
    gx = _kernels.lif_bwd(*flat, float(params.tau), float(params.v_threshold), float(params.v_reset),
                          float(cfg.alpha), bool(full_bptt), bool(state.soft), bool(cfg.membrane_arg))
    return np.asarray(gx).reshape(shape)


def lif(x: Var, params: LifParams = LifParams(), cfg: SurrogateConfig = SurrogateConfig(),
        full_bptt: bool = False):
    """Autodiff op; returns the spike Var and the :class:`LifState`."""
    s, state = multistep_lif_forward(x.data, params, cfg)

    def back(g, ctx):
        return (multistep_lif_backward(g, state, params, cfg, full_bptt),)

    out = x.tape.record("lif", (x,), s, back, {"state": state})
    return out, state


class MultistepLIF:
    def __init__(self, params: LifParams = LifParams(), surrogate: SurrogateConfig = SurrogateConfig(),
                 full_bptt: bool = False):
        self.params = params
        self.surrogate = surrogate
        self.full_bptt = full_bptt
        self.last_state: LifState | None = None

    def __call__(self, x: Var) -> Var:
        out, self.last_state = lif(x, self.params, self.surrogate, self.full_bptt)
        return out


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvBN:
    """Convolution followed by batch norm; ``T`` is folded into the batch."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        if padding is None:
            padding = kernel_size // 2
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                      fan_in).astype(dtype)
        self.gamma = np.ones(out_channels, dtype=dtype)
        self.beta = np.zeros(out_channels, dtype=dtype)
        self.running_mean = np.zeros(out_channels, dtype=dtype)
        self.running_var = np.ones(out_channels, dtype=dtype)
        self.training = True

    def parameters(self):
        return [self.weight, self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def __call__(self, x: Var) -> Var:
        tape = x.tape
        y = F.conv2d(x, tape.param(self.weight), self.stride, self.padding)
        return F.batchnorm(y, tape.param(self.gamma), tape.param(self.beta),
                           self.running_mean, self.running_var, self.training)

    def folded(self):
        """Eval-mode conv weight and bias with batch norm folded in."""
        return tc.fold_batchnorm(self.weight, self.gamma, self.beta,
                                 self.running_mean, self.running_var)

    def forward_folded(self, x):
        w, b = self.folded()
        return tc.conv2d(x, w, self.stride, self.padding, bias=b)


def convbn(x, weight, gamma, beta, running_mean, running_var, stride=1, pad=0, train=True):
    """Plain-array ConvBN: ``batchnorm(conv2d(x))``."""
    y = tc.conv2d(x, weight, stride, pad)
    return tc.batchnorm_forward(y, gamma, beta, running_mean, running_var, train)[0]
