"""Where does max-pool backward put the gradient?

:func:`analyze_routing` runs a baseline or CML cell on the tape and inspects
the gradient that reaches the ConvBN output ``x``, one pooling window at a
time.  :func:`oracle_routing` derives the expected position and magnitude for
a single window with plain scalar arithmetic and no autodiff, so the two can
be compared.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import SurrogateConfig, Tape, surrogate_derivative
from .downsample import DownsampleBlock, Variant
from .layers import LifParams, multistep_lif_forward

ROUTED_VARIANTS = (Variant.BASELINE, Variant.CML)
MAGNITUDE_RTOL = 1e-10


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def oracle_routing(variant, window, params: LifParams = LifParams(),
                   cfg: SurrogateConfig = SurrogateConfig(), seed: float = 1.0):
    """Expected ``((row, col), magnitude)`` for one window at ``T=1``.

    Baseline: spikes ``h = [v_reset + x/tau >= v_th]`` are pooled, so the
    gradient lands on the first spike in row-major order, or on ``(0, 0)``
    when the window is silent.  CML: the pool sees ``x`` itself and the
    gradient lands on its first maximum.  Either way the magnitude is
    ``seed / tau * surrogate'(H - v_th)`` with ``H`` the membrane of the
    neuron that produced the pooled value.
    """
    variant = Variant(variant)
    if variant not in ROUTED_VARIANTS:
        return None
    rows = [[float(v) for v in row] for row in window]
    tau, vth, vr = params.tau, params.v_threshold, params.v_reset

    def membrane(val):
        # one step from V[-1] = v_reset
        return vr + (val - (vr - vr)) / tau

    best = (0, 0)
    if variant is Variant.BASELINE:
        found = False
        for r, row in enumerate(rows):
            for c, val in enumerate(row):
                if membrane(val) - vth >= 0:
                    best = (r, c)
                    found = True
                    break
            if found:
                break
    else:
        best_val = rows[0][0]
        for r, row in enumerate(rows):
            for c, val in enumerate(row):
                if val > best_val:
                    best_val = val
                    best = (r, c)
    z = cfg.alpha * (membrane(rows[best[0]][best[1]]) - vth)
    # sig(z) * (1 - sig(z)) == sig(z) * sig(-z); both factors are exact in the tails
    return best, seed / tau * cfg.alpha * _sigmoid(z) * _sigmoid(-z)


def _window_view(a, k, s):
    # (T, B, C, H, W) -> (T, B, C, OH, OW, k*k)
    win = sliding_window_view(a, (k, k), axis=(3, 4))[:, :, :, ::s, ::s]
    return win.reshape(win.shape[:5] + (k * k,))


@dataclass
class RoutingReport:
    """Per-window routing facts, stored as flat arrays over all windows.

    Offsets are row-major within the window (``row * k + col``); ``-1``
    marks "none".  Oracle fields are only filled for ``T == 1``.
    """

    variant: str
    window: int
    applicable: bool = True
    reason: str = ""
    index: np.ndarray = field(default=None)  # (n, 5): t, b, c, i, j
    argmax_x: np.ndarray = field(default=None)
    first_spike: np.ndarray = field(default=None)
    first_max_h: np.ndarray = field(default=None)
    nonzero_count: np.ndarray = field(default=None)
    routed: np.ndarray = field(default=None)
    grad_value: np.ndarray = field(default=None)
    surrogate_factor: np.ndarray = field(default=None)
    seed: np.ndarray = field(default=None)
    oracle_pos: np.ndarray | None = None
    oracle_mag: np.ndarray | None = None

    @property
    def n_windows(self) -> int:
        return 0 if self.routed is None else len(self.routed)

    def one_hot_fraction(self) -> float:
        return float(np.mean(self.nonzero_count <= 1))

    def argmax_agreement(self) -> float:
        return float(np.mean(self.routed == self.argmax_x))

    def first_max_h_agreement(self) -> float:
        return float(np.mean(self.routed == self.first_max_h))

    def oracle_agreement(self) -> float | None:
        if self.oracle_pos is None:
            return None
        return float(np.mean(self.routed == self.oracle_pos))

    def mismatch_rate(self) -> float:
        return float(np.mean(self.routed != self.argmax_x))

    def magnitude_max_rel_err(self, against: str = "law") -> float:
        """Largest relative error of the routed gradient.

        ``law`` compares with ``seed * surrogate_factor`` computed from the
        saved membrane; ``oracle`` with the scalar oracle.
        """
        ref = self.seed * self.surrogate_factor if against == "law" else self.oracle_mag
        if ref is None:
            return float("nan")
        denom = np.maximum(np.abs(ref), np.finfo(float).tiny)
        return float(np.max(np.abs(self.grad_value - ref) / denom)) if len(ref) else 0.0

    def iter_records(self):
        k = self.window
        for n in range(self.n_windows):
            t, b, c, i, j = (int(v) for v in self.index[n])

            def pos(off):
                off = int(off)
                return None if off < 0 else [off // k, off % k]

            rec = {
                "t": t, "b": b, "c": c, "i": i, "j": j,
                "argmax_x": pos(self.argmax_x[n]),
                "first_spike_h": pos(self.first_spike[n]),
                "grad_positions": int(self.nonzero_count[n]),
                "routed": pos(self.routed[n]),
                "grad_value": float(self.grad_value[n]),
                "surrogate_factor": float(self.surrogate_factor[n]),
                "agrees_argmax": bool(self.routed[n] == self.argmax_x[n]),
            }
            if self.oracle_pos is not None:
                rec["oracle_routed"] = pos(self.oracle_pos[n])
                rec["oracle_magnitude"] = float(self.oracle_mag[n])
                rec["agrees_oracle"] = bool(self.routed[n] == self.oracle_pos[n])
            yield rec

    def summary(self) -> dict:
        if not self.applicable:
            return {"variant": self.variant, "applicable": False, "reason": self.reason}
        out = {
            "variant": self.variant,
            "applicable": True,
            "windows": self.n_windows,
            "window_size": self.window,
            "one_hot_fraction": self.one_hot_fraction(),
            "argmax_agreement": self.argmax_agreement(),
            "first_max_h_agreement": self.first_max_h_agreement(),
            "mismatch_rate": self.mismatch_rate(),
            "spiking_window_fraction": float(np.mean(self.first_spike >= 0)),
            "magnitude_max_rel_err": self.magnitude_max_rel_err("law"),
        }
        if self.oracle_pos is not None:
            out["oracle_agreement"] = self.oracle_agreement()
            out["oracle_magnitude_max_rel_err"] = self.magnitude_max_rel_err("oracle")
        return out

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            if self.applicable:
                for rec in self.iter_records():
                    fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"summary": self.summary()}) + "\n")


def analyze_routing(block: DownsampleBlock, inp, seed=None, preactivation=True,
                    with_oracle=True) -> RoutingReport:
    """Trace gradient from the cell output back to the ConvBN output ``x``.

    With ``preactivation`` the input *is* ``x`` (the ConvBN stage is skipped);
    otherwise ``inp`` goes through the whole cell and the gradient is read at
    the ConvBN output.
    """
    variant = block.variant
    k = block.pool.window
    if variant not in ROUTED_VARIANTS:
        return RoutingReport(variant=variant.value, window=k, applicable=False,
                             reason=f"{variant.label} has no max-pool routing; gradient is dense")
    tape = Tape()
    leaf = tape.leaf(np.asarray(inp))
    trace = block.spike_stage(leaf) if preactivation else block.forward_traced(leaf)
    y = trace.y
    if seed is None:
        seed = np.ones_like(y.data)
    seed = np.asarray(seed, dtype=y.data.dtype)
    gx = tape.backward(y, seed, wrt=[trace.x])[trace.x]

    x = trace.x.data
    params, cfg = block.lif_params, block.surrogate
    xw = _window_view(x, k, block.stride)
    gw = _window_view(gx, k, block.stride)
    shape = xw.shape[:5]
    # the spike map the baseline pools over; for CML this is what it would see
    if variant is Variant.BASELINE:
        h_full = trace.h.data
        membrane = block.lif.last_state.H
    else:
        h_full, _ = multistep_lif_forward(x, params, cfg, soft=False)
        membrane = block.lif.last_state.H
    hw = _window_view(h_full, k, block.stride)

    argmax_x = xw.argmax(axis=-1)
    first_max_h = hw.argmax(axis=-1)
    spiking = hw >= 1
    first_spike = np.where(spiking.any(axis=-1), spiking.argmax(axis=-1), -1)
    nonzero = gw != 0
    nonzero_count = nonzero.sum(axis=-1)
    routed = np.where(nonzero_count > 0, nonzero.argmax(axis=-1), -1)
    grad_value = np.take_along_axis(gw, np.maximum(routed, 0)[..., None], axis=-1)[..., 0]
    grad_value = np.where(routed >= 0, grad_value, 0.0)

    # membrane feeding the pooled output element
    if variant is Variant.BASELINE:
        mw = _window_view(membrane, k, block.stride)
        h_at = np.take_along_axis(mw, np.maximum(routed, 0)[..., None], axis=-1)[..., 0]
    else:
        h_at = membrane
    if cfg.membrane_arg:
        raise ValueError("routing magnitude law is stated for the threshold surrogate argument")
    factor = surrogate_factor(h_at, params, cfg)

    index = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=-1)
    report = RoutingReport(
        variant=variant.value, window=k, index=index,
        argmax_x=argmax_x.ravel(), first_spike=first_spike.ravel(),
        first_max_h=first_max_h.ravel(), nonzero_count=nonzero_count.ravel(),
        routed=routed.ravel(), grad_value=grad_value.ravel(),
        surrogate_factor=factor.ravel(), seed=seed.ravel().astype(np.float64),
    )
    if with_oracle and x.shape[0] == 1:
        flat_x = xw.reshape(-1, k, k).tolist()
        seeds = seed.ravel().tolist()
        pos = np.empty(len(flat_x), dtype=np.int64)
        mag = np.empty(len(flat_x))
        for n, (win, sd) in enumerate(zip(flat_x, seeds)):
            (r, c), m = oracle_routing(variant, win, params, cfg, sd)
            pos[n] = r * k + c
            mag[n] = m
        report.oracle_pos = pos
        report.oracle_mag = mag
    return report


def surrogate_factor(H, params: LifParams, cfg: SurrogateConfig):
    """``surrogate'(H - v_th) / tau`` elementwise, in float64."""
    return surrogate_derivative(np.asarray(H, dtype=np.float64) - params.v_threshold, cfg) / params.tau


def probe_block(variant, stride=2, params: LifParams = LifParams(),
                cfg: SurrogateConfig = SurrogateConfig(), dtype=np.float64) -> DownsampleBlock:
    """A single-channel cell for feeding pre-activation windows directly."""
    return DownsampleBlock(1, 1, variant, stride=stride, lif_params=params, surrogate=cfg, dtype=dtype)


def windows_to_tensor(windows) -> np.ndarray:
    """Stack ``(N, k, k)`` windows into a ``(1, N, 1, k, k)`` pre-activation tensor."""
    w = np.asarray(windows, dtype=np.float64)
    return np.ascontiguousarray(w[None, :, None, :, :])


def mismatch_rate(x, params: LifParams = LifParams(), variant="baseline", stride=2,
                  cfg: SurrogateConfig = SurrogateConfig()) -> float:
    """Fraction of windows whose routed gradient misses the argmax of ``x``."""
    block = probe_block(variant, stride, params, cfg, dtype=np.asarray(x).dtype)
    report = analyze_routing(block, x, with_oracle=False)
    if not report.applicable:
        raise ValueError(report.reason)
    rate = report.mismatch_rate()
    if block.variant is Variant.CML:
        assert rate == 0.0, f"CML routed away from argmax in {rate:.3%} of windows"
    return rate


def random_windows(rng, n, k, params: LifParams = LifParams(), spike_rate=0.5, spread=1.0):
    """Gaussian pre-activation windows centred so about ``spike_rate`` of
    positions cross threshold at ``T=1``."""
    centre = params.tau * (params.v_threshold - params.v_reset)
    shift = NormalDist().inv_cdf(1.0 - spike_rate) * spread if 0 < spike_rate < 1 else 0.0
    return rng.normal(centre - shift, spread, size=(n, k, k))
