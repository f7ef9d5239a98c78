"""The compiled kernels against the numpy fallback on identical inputs."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpmcmc import _backend, _core_py

from helpers import random_instance

pytestmark = pytest.mark.skipif(_backend.BACKEND != "cython", reason="compiled core not built")

BACKENDS = {"py": _core_py}
if _backend.BACKEND == "cython":
    BACKENDS["c"] = _backend.core


def _weights(rng, M):
    w = rng.exponential(size=M) ** 2
    w[rng.random(M) < 0.1] = 0.0
    if not w.any():
        w[0] = 1.0
    return w / w.sum()


def _forward(kern, tab, y, N, uniforms, ref, store):
    yk = y if kern is _core_py else y[:, 0].copy()
    return kern.forward(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, yk, tab.m0, tab.P0, tab.log_nu,
                        tab.trans_kind, tab.trans_param, N, uniforms, ref, store)


class TestResampling:
    @given(seed=st.integers(0, 2**32 - 1), M=st.integers(2, 50), N=st.integers(1, 30))
    @settings(max_examples=200, deadline=None)
    def test_solve_threshold(self, seed, M, N):
        w = _weights(np.random.default_rng(seed), M)
        a, b = (k.solve_threshold(w, N) for k in BACKENDS.values())
        assert a[1] == b[1]
        assert a[0] == pytest.approx(b[0], rel=1e-12)

    @given(seed=st.integers(0, 2**32 - 1), M=st.integers(3, 40), N=st.integers(1, 20), forced=st.booleans())
    @settings(max_examples=200, deadline=None)
    def test_optimal_resample(self, seed, M, N, forced):
        rng = np.random.default_rng(seed)
        w = _weights(rng, M)
        kappa = int(rng.choice(M, p=w)) if forced else -1
        u = 1.0 - rng.random()
        (sa, la, ca, na), (sb, lb, cb, nb) = (k.optimal_resample(w, N, u, kappa) for k in BACKENDS.values())
        np.testing.assert_array_equal(sa, sb)
        np.testing.assert_allclose(la, lb, rtol=1e-12)
        assert na == nb

    def test_stratified_indices(self, rng):
        for _ in range(200):
            w = _weights(rng, 12)
            w = np.minimum(w, 1 / 4)
            w /= w.sum()
            u = 1.0 - rng.random()
            a, b = (np.unique(k.stratified_indices(w, 4, u)) for k in BACKENDS.values())
            np.testing.assert_array_equal(a, b)
            kappa = int(rng.choice(12, p=w))
            a, b = (np.unique(k.conditional_stratified_indices(w, kappa, 4, u)) for k in BACKENDS.values())
            np.testing.assert_array_equal(a, b)


class TestFilter:
    @pytest.mark.parametrize("polya", [False, True])
    @pytest.mark.parametrize("conditional", [False, True])
    def test_forward(self, rng, polya, conditional):
        for _ in range(10):
            T = 12
            model, theta, y = random_instance(rng, T, K=3, dz=2, polya=polya)
            tab = model.tables(theta, T)
            uniforms = 1.0 - rng.random(T)
            ref = rng.integers(0, 3, T) if conditional else np.zeros(0, dtype=np.int64)
            a, b = (_forward(k, tab, y, 4, uniforms, ref, True) for k in BACKENDS.values())
            for key in ("sizes", "states", "parents", "n_maint", "kappa"):
                np.testing.assert_array_equal(a[key], b[key], err_msg=key)
            for key in ("logw", "lwbar", "log_incr", "means", "covs"):
                np.testing.assert_allclose(a[key], b[key], rtol=1e-9, atol=1e-12, err_msg=key)

    def test_backward(self, rng):
        for polya in (False, True):
            T = 10
            model, theta, y = random_instance(rng, T, dz=2, polya=polya)
            tab = model.tables(theta, T)
            out = _forward(_core_py, tab, y, 3, 1.0 - rng.random(T), rng.integers(0, 2, T), True)
            counts = out["counts"] if out["counts"] is not None else np.zeros((1, 1, 1, 1), dtype=np.int32)
            for _ in range(20):
                u = 1.0 - rng.random(T)
                paths = [
                    k.backward(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, y[:, 0].copy(), tab.trans_kind,
                               tab.trans_param, out["sizes"], out["states"], out["parents"], out["logw"],
                               out["means"], out["covs"], counts, u)
                    for k in BACKENDS.values()
                ]
                np.testing.assert_array_equal(*paths)


class TestBackwardKernels:
    def test_potential_step(self, rng):
        model, theta, y = random_instance(rng, 4, dz=3)
        tab = model.tables(theta, 4)
        Xi, mu = np.eye(3) * 0.5, rng.normal(size=3)
        for x in range(2):
            a, b = (k.potential_step(Xi, mu, tab.A[x], tab.Q[x], tab.C[x, 0], tab.R[x, 0, 0], tab.fu[1, x],
                                     tab.gu[1, x, 0], 0.3) for k in BACKENDS.values())
            np.testing.assert_allclose(a[0], b[0], rtol=1e-10, atol=1e-13)
            np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-13)

    def test_backward_loglik_batch(self, rng):
        G = rng.normal(size=(3, 3))
        Xi, mu = G @ G.T, rng.normal(size=3)
        means = rng.normal(size=(6, 3))
        covs = np.stack([(lambda H: H @ H.T)(rng.normal(size=(3, 3))) for _ in range(6)])
        a, b = (k.backward_loglik_batch(means, covs, Xi, mu) for k in BACKENDS.values())
        np.testing.assert_allclose(a, b, rtol=1e-10)

    def test_ffbs(self, rng):
        for dz in (1, 2, 3):
            model, theta, y = random_instance(rng, 9, dz=dz)
            tab = model.tables(theta, 9)
            path = rng.integers(0, 2, 9)
            normals = rng.standard_normal((10, dz))
            (za, pa), (zb, pb) = (
                k.ffbs(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, y if k is _core_py else y[:, 0].copy(),
                       tab.m0, tab.P0, path, normals)
                for k in BACKENDS.values()
            )
            np.testing.assert_allclose(za, zb, rtol=1e-9, atol=1e-12)
            assert pa == pytest.approx(pb, abs=1e-12)


def test_generic_transitions_use_fallback(rng):
    from dpmcmc.model import ModelSpec, Theta
    from dpmcmc.models import toy, toy_theta

    base = toy()
    model = ModelSpec(2, base.matrices, base.init_belief, transition=lambda th, h: [0.5, 0.5])
    tab = model.tables(Theta(dict(toy_theta().params)), 3)
    assert _backend.kernels_for(tab) is _core_py
