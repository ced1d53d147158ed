import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmlsnn import functional as F
from cmlsnn import tensor as tc
from cmlsnn.autodiff import SurrogateConfig, Tape, soft_forward_mode, surrogate_derivative
from cmlsnn.gradcheck import FD_EPS, FD_TOL, central_difference, rel_error
from cmlsnn.layers import (ConfigError, ConvBN, LifParams, MultistepLIF, convbn, multistep_lif_backward,
                           multistep_lif_forward)

from conftest import naive_conv


def lif_reference(x, tau=2.0, v_th=1.0, v_reset=0.0):
    """Scalar loop over the charge / fire / reset recurrences."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    h = np.zeros_like(flat)
    s = np.zeros_like(flat)
    v = np.zeros_like(flat)
    for i in range(flat.shape[1]):
        prev = v_reset
        for t in range(flat.shape[0]):
            ht = prev + (flat[t, i] - (prev - v_reset)) / tau
            st_ = 1.0 if ht >= v_th else 0.0
            prev = ht * (1 - st_) + v_reset * st_
            h[t, i], s[t, i], v[t, i] = ht, st_, prev
    return s.reshape(x.shape), h.reshape(x.shape), v.reshape(x.shape)


# --- worked examples --------------------------------------------------------

def test_lif_threshold_example():
    s, state = multistep_lif_forward(np.array([[2.0]]))
    assert state.H.item() == 1.0
    assert s.item() == 1.0
    assert state.V.item() == 0.0


def test_lif_quiescent():
    s, state = multistep_lif_forward(np.zeros((6, 3, 4)))
    assert not s.any()
    assert not state.V.any()


def test_lif_subthreshold_example():
    # the first step leaves V=0.5, the second reproduces H = 0.5 + 0.5*(1.0-0.5)
    s, state = multistep_lif_forward(np.array([[1.0], [1.0]]))
    assert state.V[0].item() == 0.5
    assert state.H[1].item() == 0.75
    assert s[1].item() == 0.0
    assert state.V[1].item() == 0.75


def test_lif_matches_reference(rng):
    x = rng.normal(1.0, 1.5, size=(5, 2, 3, 4, 4))
    s, state = multistep_lif_forward(x)
    rs, rh, rv = lif_reference(x)
    np.testing.assert_array_equal(s, rs)
    np.testing.assert_allclose(state.H, rh, rtol=0, atol=1e-14)
    np.testing.assert_allclose(state.V, rv, rtol=0, atol=1e-14)


def test_lif_nondefault_params(rng):
    p = LifParams(tau=3.0, v_threshold=0.5, v_reset=-0.2)
    x = rng.normal(0.5, 1.0, size=(4, 30))
    s, state = multistep_lif_forward(x, p)
    rs, rh, _ = lif_reference(x, 3.0, 0.5, -0.2)
    np.testing.assert_array_equal(s, rs)
    np.testing.assert_allclose(state.H, rh, atol=1e-14)


def test_state_is_fresh_each_call():
    x = np.full((1, 1), 1.5)
    first = multistep_lif_forward(x)[1].H.copy()
    second = multistep_lif_forward(x)[1].H
    np.testing.assert_array_equal(first, second)


def test_lif_preserves_f32():
    s, state = multistep_lif_forward(np.ones((2, 3), dtype=np.float32))
    assert s.dtype == state.H.dtype == np.float32


@pytest.mark.parametrize("kw", [dict(tau=0.0), dict(tau=-1.0), dict(tau=0.5),
                                dict(v_threshold=0.0, v_reset=0.0), dict(v_threshold=-1.0)])
def test_lif_params_rejected(kw):
    with pytest.raises(ConfigError):
        LifParams(**kw)


# --- invariants -------------------------------------------------------------

finite = st.floats(-20, 20, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)), elements=finite))
def test_spikes_binary_and_reset_consistent(x):
    s, state = multistep_lif_forward(x)
    assert set(np.unique(s)) <= {0.0, 1.0}
    fired = s == 1
    assert np.all(state.V[fired] == 0.0)
    np.testing.assert_array_equal(state.V[~fired], state.H[~fired])
    np.testing.assert_array_equal(fired, state.H >= 1.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (1, 16), elements=finite),
       arrays(np.float64, (1, 16), elements=st.floats(0, 10, width=64)))
def test_t1_monotone(x, delta):
    lo = multistep_lif_forward(x)[0]
    hi = multistep_lif_forward(x + delta)[0]
    assert np.all(lo <= hi)


def test_gradient_proportional_to_surrogate(rng):
    x = rng.normal(2.0, 4.0, size=(3, 200))
    _, state = multistep_lif_forward(x)
    g = multistep_lif_backward(np.ones_like(x), state)
    np.testing.assert_allclose(g, 0.5 * surrogate_derivative(state.H - 1.0), rtol=1e-13)
    far = np.abs(state.H - 1.0) > 5
    assert far.any()
    assert np.all(g[far] < 0.5 * 4 * np.exp(-4 * 5))


# --- backward ---------------------------------------------------------------

def test_backward_peak_example():
    _, state = multistep_lif_forward(np.array([[2.0]]))
    assert multistep_lif_backward(np.array([[1.0]]), state).item() == 0.5


def test_backward_zero_grad_stays_zero(rng):
    x = rng.normal(size=(4, 10))
    _, state = multistep_lif_forward(x)
    gs = rng.normal(size=x.shape)
    gs[:, ::3] = 0.0
    for full in (False, True):
        g = multistep_lif_backward(gs, state, full_bptt=full)
        if not full:
            assert np.all(g[gs == 0] == 0)
        else:
            # the temporal chain only reaches earlier steps
            assert np.all(g[-1][gs[-1] == 0] == 0)


def test_backward_shape_mismatch():
    _, state = multistep_lif_forward(np.ones((2, 3)))
    with pytest.raises(tc.ShapeError):
        multistep_lif_backward(np.ones((3, 2)), state)


def test_soft_t4_matches_fd(rng):
    params = LifParams()
    x = rng.normal(1.0, 1.0, size=(4, 2, 3))
    w = rng.normal(size=x.shape)

    def loss():
        with soft_forward_mode():
            return float(np.sum(multistep_lif_forward(x, params)[0] * w))

    with soft_forward_mode():
        _, state = multistep_lif_forward(x, params)
    g = multistep_lif_backward(w, state, params, full_bptt=True)
    num = central_difference(loss, x, np.arange(x.size), FD_EPS)
    assert rel_error(g.reshape(-1), num).max() < FD_TOL


def test_detached_mode_drops_temporal_chain(rng):
    x = rng.normal(1.0, 1.0, size=(4, 5))
    _, state = multistep_lif_forward(x)
    gs = np.zeros_like(x)
    gs[-1] = 1.0
    g = multistep_lif_backward(gs, state)
    assert not g[:-1].any()
    g_full = multistep_lif_backward(gs, state, full_bptt=True)
    np.testing.assert_array_equal(g_full[-1], g[-1])


def test_membrane_arg_flag():
    # X=2 fires, V resets to 0, so H - V = 1 while H - Vth = 0
    _, state = multistep_lif_forward(np.array([[2.0]]))
    g = multistep_lif_backward(np.array([[1.0]]), state, cfg=SurrogateConfig(membrane_arg=True))
    assert abs(g.item() - 0.5 * surrogate_derivative(1.0)) < 1e-15


def test_threads_use_their_own_state(rng):
    layer = MultistepLIF()
    inputs = [rng.normal(1, 2, size=(3, 50)) for _ in range(8)]
    results = [None] * len(inputs)

    def work(i):
        tape = Tape()
        xv = tape.leaf(inputs[i])
        with soft_forward_mode(i % 2 == 0):
            out = layer(xv)
        results[i] = (out.data.copy(), tape.backward(out)[xv])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(inputs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i, x in enumerate(inputs):
        with soft_forward_mode(i % 2 == 0):
            s, state = multistep_lif_forward(x)
        np.testing.assert_array_equal(results[i][0], s)
        np.testing.assert_array_equal(results[i][1], multistep_lif_backward(np.ones_like(x), state))


# --- ConvBN -----------------------------------------------------------------

def test_convbn_identity_bn_equals_conv(rng):
    x = rng.normal(size=(2, 2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    c = 4
    y = convbn(x, w, np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), pad=1, train=False)
    ref = naive_conv(x, w, 1, 1) / np.sqrt(1 + tc.BN_EPS)
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_convbn_fold_matches(rng):
    layer = ConvBN(3, 5, 3, rng=rng, dtype=np.float64)
    layer.gamma[:] = rng.uniform(0.5, 2.0, 5)
    layer.beta[:] = rng.normal(size=5)
    for _ in range(3):
        layer(Tape().leaf(rng.normal(0.3, 2.0, size=(2, 4, 3, 8, 8))))
    layer.training = False
    x = rng.normal(size=(2, 3, 3, 8, 8))
    ref = layer(Tape().leaf(x)).data
    np.testing.assert_allclose(layer.forward_folded(x), ref, atol=1e-5)
    assert np.abs(layer.forward_folded(x) - ref).max() < 1e-10


def test_convbn_gradcheck(rng):
    layer = ConvBN(2, 3, 3, stride=2, rng=rng, dtype=np.float64)
    layer.gamma[:] = rng.uniform(0.8, 1.6, 3)
    x = rng.normal(size=(2, 2, 2, 6, 6))
    w = rng.normal(size=(2, 2, 3, 3, 3))

    def run():
        tape = Tape()
        xv = tape.leaf(x)
        return F.total(F.mul(layer(xv), tape.constant(w))), tape, xv

    loss, tape, xv = run()
    tape.backward(loss)
    for arr, grad in [(x, xv.grad), (layer.weight, tape.grad_of(layer.weight)),
                      (layer.gamma, tape.grad_of(layer.gamma)), (layer.beta, tape.grad_of(layer.beta))]:
        idx = rng.choice(arr.size, size=min(arr.size, 30), replace=False)
        num = central_difference(lambda: float(run()[0].data), arr, idx, FD_EPS)
        assert rel_error(grad.reshape(-1)[idx], num).max() < FD_TOL


def test_convbn_defaults():
    layer = ConvBN(1, 2, 3)
    assert layer.padding == 1 and layer.stride == 1
    assert layer.weight.dtype == np.float32
    assert len(layer.parameters()) == 3 and len(layer.buffers()) == 2
