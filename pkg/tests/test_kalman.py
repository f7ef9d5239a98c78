import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from dpmcmc import _core_py
from dpmcmc._backend import BACKEND
from dpmcmc.kalman import (
    GaussianBelief,
    KalmanError,
    conditional_loglik,
    ffbs_continuous,
    filter_path,
    kalman_step,
)
from dpmcmc.model import ModelSpec, Theta, simulate
from dpmcmc.models import example1, example1_theta, example2, example2_theta
from dpmcmc.oracle import joint_gaussian_loglik, smoothing_moments

from helpers import random_instance

HALF = Theta({}, trans_matrix=np.full((2, 2), 0.5))


def scalar_model(a, b, c, d, P0=1.0, m0=0.0):
    mats = (np.array([[a]]), np.array([[b]]), np.array([[c]]), np.array([[d]]), np.zeros((1, 1)), np.zeros((1, 1)))
    return ModelSpec(2, lambda th, x: mats, (np.array([m0]), np.array([[P0]])))


class TestKalmanStep:
    def test_conjugate_by_hand(self):
        # A=0, B=1: the predicted state is N(0, 1) and y = z + N(0, 1)
        model = scalar_model(0.0, 1.0, 1.0, 1.0)
        y = 0.8
        post, pred = kalman_step(model, HALF, GaussianBelief([3.0], [[5.0]]), 0, y)
        assert post.mean[0] == pytest.approx(y / 2)
        assert post.cov[0, 0] == pytest.approx(0.5)
        assert pred.loglik == pytest.approx(norm.logpdf(y, 0.0, math.sqrt(2.0)))
        assert pred.mean[0] == pytest.approx(0.0)
        assert pred.cov[0, 0] == pytest.approx(2.0)

    def test_degenerate_prior_keeps_mean(self):
        model = scalar_model(1.0, 0.0, 1.0, 1.0, P0=0.0, m0=1.7)
        belief = GaussianBelief([1.7], [[0.0]])
        for y in (0.3, -2.0, 5.0):
            belief, _ = kalman_step(model, HALF, belief, 1, y)
            assert belief.mean[0] == pytest.approx(1.7)
            assert belief.cov[0, 0] == 0.0

    def test_example1_level_not_inflated(self):
        # x = 0 leaves the level variance untouched in the prediction
        model, theta = example1(), example1_theta()
        prior = GaussianBelief([0.0, 0.0], [[1.0, 0.0], [0.0, 2.0]])
        _, pred = kalman_step(model, theta, prior, 0, 0.0)
        # predictive variance of y = phi^2 * 1 + sigma^2 + 2 (level)
        assert pred.cov[0, 0] == pytest.approx(0.01 * 1.0 + 0.01 + 2.0)
        _, pred1 = kalman_step(model, theta, prior, 1, 0.0)
        assert pred1.cov[0, 0] == pytest.approx(0.01 + 0.01 + 2.0 + 0.01)

    def test_singular_innovation_raises(self):
        model = scalar_model(1.0, 0.0, 1.0, 0.0, P0=0.0)
        with pytest.raises(KalmanError, match="not positive"):
            kalman_step(model, HALF, GaussianBelief([0.0], [[0.0]]), 0, 1.0)

    def test_input_enters_prediction(self):
        mats = (np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.array([[2.0]]), np.array([[-1.0]]))
        model = ModelSpec(2, lambda th, x: mats, (np.zeros(1), np.eye(1)))
        _, pred = kalman_step(model, HALF, GaussianBelief([1.0], [[1.0]]), 0, 0.0, u=[0.5])
        assert pred.mean[0] == pytest.approx(1.0 + 2.0 * 0.5 - 0.5)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_covariances_symmetric_psd(self, seed):
        rng = np.random.default_rng(seed)
        model, theta, y = random_instance(rng, 6, dy=int(rng.integers(1, 3)))
        path = rng.integers(0, 2, 6)
        _, Ps, _ = filter_path(model.tables(theta, 6), path, y)
        for P in Ps:
            np.testing.assert_allclose(P, P.T, atol=1e-10)
            assert np.linalg.eigvalsh(P).min() >= -1e-8


class TestConditionalLoglik:
    def test_single_step(self):
        model = scalar_model(0.5, 1.0, 1.0, 0.5, P0=2.0)
        # y_1 ~ N(0, 0.25 * 2 + 1 + 0.25)
        assert conditional_loglik(model, HALF, [0], [0.3]) == pytest.approx(norm.logpdf(0.3, 0, math.sqrt(1.75)))

    def test_scalar_t5_against_joint_gaussian(self, rng):
        model, theta, y = random_instance(rng, 5, dz=1)
        path = [0, 1, 1, 0, 1]
        ref = joint_gaussian_loglik(model, theta, path, y)
        assert conditional_loglik(model, theta, path, y) == pytest.approx(ref, rel=1e-8)

    @given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 6), dz=st.integers(1, 3), dy=st.integers(1, 2))
    @settings(max_examples=60, deadline=None)
    def test_against_joint_gaussian(self, seed, T, dz, dy):
        rng = np.random.default_rng(seed)
        model, theta, y = random_instance(rng, T, dz=dz, dy=dy)
        path = rng.integers(0, 2, T)
        ref = joint_gaussian_loglik(model, theta, path, y)
        assert abs(conditional_loglik(model, theta, path, y) - ref) <= 1e-8 * abs(ref) + 1e-12

    def test_uninformative_observation(self, rng):
        model, theta, y = random_instance(rng, 4, dz=2)
        base = conditional_loglik(model, theta, [0, 0, 0], y[:3])
        tab_mats = [model.matrices(theta, x) for x in range(2)]
        big = [(A, B, C, np.array([[1e6]]), F, G) for A, B, C, D, F, G in tab_mats]
        wide = ModelSpec(2, lambda th, x: tab_mats[x] if x == 0 else big[x], model.init_belief, inputs=model.inputs)
        total = conditional_loglik(wide, theta, [0, 0, 0, 1], np.vstack([y[:3], [[0.7]]]))
        # the last increment tends to log N(0.7; ., 1e12), dominated by the noise variance
        assert total - base == pytest.approx(norm.logpdf(0.0, 0.0, 1e6), abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            conditional_loglik(scalar_model(0.5, 1, 1, 1), HALF, [0, 1], [0.1])


class TestFfbs:
    def test_noise_free_is_deterministic(self, rng):
        A = np.array([[0.9]])
        mats = (A, np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        model = ModelSpec(2, lambda th, x: mats, (np.array([2.0]), np.zeros((1, 1))))
        tr = simulate(model, HALF, 5, 1)
        z = ffbs_continuous(model, HALF, tr.discrete, tr.observations, rng)
        np.testing.assert_allclose(z[:, 0], 2.0 * 0.9 ** np.arange(6))

    def test_scalar_moments_against_oracle(self, rng):
        model, theta, y = random_instance(rng, 3, dz=1)
        path = [1, 0, 1]
        tab = model.tables(theta, 3)
        S = 100_000
        draws = np.array([ffbs_continuous(model, theta, path, y, rng, tables=tab)[:, 0] for _ in range(S)])
        mean, cov = smoothing_moments(model, theta, path, y)
        se = np.sqrt(np.diag(cov) / S)
        assert np.all(np.abs(draws.mean(axis=0) - mean[:, 0]) < 3 * se)
        assert np.var(draws[:, 1]) == pytest.approx(cov[1, 1], rel=0.05)
        np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.05, atol=0.02 * cov.max())

    def test_singular_dynamics_against_oracle(self, rng):
        # example 2 has exactly singular predictive covariances (x = 2 resets the state)
        model, theta = example2(), example2_theta()
        path = np.array([0, 2, 1, 0, 0])
        y = simulate(model, theta, 5, 4).observations
        tab = model.tables(theta, 5)
        S = 40_000
        draws = np.array([ffbs_continuous(model, theta, path, y, rng, tables=tab) for _ in range(S)])
        mean, cov = smoothing_moments(model, theta, path, y)
        se = np.sqrt(np.maximum(np.diag(cov), 1e-30) / S).reshape(6, 2)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se + 1e-9)
        np.testing.assert_allclose(np.cov(draws.reshape(S, -1).T), cov, rtol=0.06, atol=0.02 * np.abs(cov).max())

    def test_backends_agree(self, rng):
        from dpmcmc import _backend

        if BACKEND != "cython":
            pytest.skip("compiled core not built")
        model, theta, y = random_instance(rng, 8, dz=3)
        tab = model.tables(theta, 8)
        path = rng.integers(0, 2, 8)
        normals = rng.standard_normal((9, 3))
        a, pa = _core_py.ffbs(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, y, tab.m0, tab.P0, path, normals)
        b, pb = _backend.core.ffbs(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, y[:, 0], tab.m0, tab.P0, path, normals)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        assert pa == pytest.approx(pb)

    def test_vector_observations(self, rng):
        model, theta, y = random_instance(rng, 4, dz=2, dy=2)
        z = ffbs_continuous(model, theta, [0, 1, 1, 0], y, rng)
        assert z.shape == (5, 2) and np.all(np.isfinite(z))


class TestLdl:
    def test_generalised_inverse(self, rng):
        G = rng.normal(size=(4, 2))
        S = G @ G.T  # rank 2
        L, d, _ = _core_py.ldl_psd(S)
        np.testing.assert_allclose((L * d) @ L.T, S, atol=1e-10)
        b = S @ rng.normal(size=4)
        x = _core_py.ldl_solve(L, d, b)
        np.testing.assert_allclose(S @ x, b, atol=1e-9)

    def test_reports_negative_pivot(self):
        _, d, piv = _core_py.ldl_psd(np.array([[1.0, 0.0], [0.0, -0.5]]))
        assert piv == pytest.approx(-0.5)
        assert d[1] == 0.0
