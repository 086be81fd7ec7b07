import numpy as np
import pytest

from fgin.params import ParamStore, adam_step, init_conv


def scalar_store(value=0.5, grad=1.0, dtype=np.float64):
    st = ParamStore(dtype)
    st.add("p", np.array([value]))
    st.grads["p"][...] = grad
    return st


def test_adam_first_step_moves_by_lr():
    st = scalar_store()
    adam_step(st, lr=1e-3)
    np.testing.assert_allclose(st.params["p"], 0.5 - 1e-3, rtol=0, atol=1e-10)
    assert st.t == 1


def adam_reference(g_seq, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, p=0.0):
    m = v = 0.0
    for t, g in enumerate(g_seq, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_reference_sequence():
    gs = [0.3, -1.2, 2.0, 0.0, 0.7]
    st = scalar_store(value=0.0)
    for g in gs:
        st.grads["p"][...] = g
        adam_step(st, lr=1e-3)
    np.testing.assert_allclose(st.params["p"][0], adam_reference(gs), rtol=1e-12)


def test_adam_zero_gradient():
    fresh = scalar_store(grad=0.0)
    adam_step(fresh, lr=1e-2)
    np.testing.assert_array_equal(fresh.params["p"], [0.5])
    # with history, a zero gradient only decays the moments
    st = scalar_store(grad=1.0)
    adam_step(st, lr=1e-2)
    m, v = st.m["p"].copy(), st.v["p"].copy()
    st.zero_grad()
    adam_step(st, lr=1e-2)
    np.testing.assert_allclose(st.m["p"], 0.9 * m)
    np.testing.assert_allclose(st.v["p"], 0.999 * v)


def test_adam_deterministic(rng):
    a, b = ParamStore(np.float32), ParamStore(np.float32)
    init_conv(a, np.random.default_rng(3), "c", 3, 2, 2)
    init_conv(b, np.random.default_rng(3), "c", 3, 2, 2)
    g = rng.standard_normal((3, 3, 2, 2))
    for st in (a, b):
        st.grads["c.w"][...] = g
        adam_step(st)
    np.testing.assert_array_equal(a.params["c.w"], b.params["c.w"])


def test_adam_missing_gradient():
    st = scalar_store()
    del st.grads["p"]
    with pytest.raises(KeyError, match="'p'"):
        adam_step(st)


def test_adam_step_index():
    with pytest.raises(ValueError):
        adam_step(scalar_store(), t=0)


def test_init_conv_limits():
    st = ParamStore(np.float64)
    init_conv(st, np.random.default_rng(0), "c", 3, 8, 4)
    lim = np.sqrt(6.0 / (3 * 3 * 8))
    assert np.abs(st.params["c.w"]).max() <= lim
    np.testing.assert_array_equal(st.params["c.b"], 0)


def test_store_copy_and_load():
    st = scalar_store()
    cp = st.copy()
    st.params["p"][...] = 9
    assert cp.params["p"][0] == 0.5
    st.load_state(cp)
    assert st.params["p"][0] == 0.5
    with pytest.raises(KeyError):
        st.add("p", np.zeros(1))
