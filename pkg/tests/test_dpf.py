import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from dpmcmc.dpf import (
    KEEP_ALL,
    DegenerateFilterError,
    dpf_run,
    optimal_resample,
    sample_path,
    solve_threshold,
    stratified_resample,
    trace_paths,
)
from dpmcmc.model import ModelSpec, Theta
from dpmcmc.oracle import enumerate_posterior

from helpers import binomial_z, empirical, path_index, random_instance, tiny_toy


def _weights(seed, M):
    rng = np.random.default_rng(seed)
    w = rng.exponential(size=M) ** 3
    return w / w.sum()


class TestSolveThreshold:
    def test_uniform(self):
        C, L = solve_threshold([0.25] * 4, 2)
        assert C == pytest.approx(2.0)
        assert L == 0

    def test_one_maintained(self):
        C, L = solve_threshold([0.7, 0.1, 0.1, 0.1], 2)
        assert C == pytest.approx(10 / 3)
        assert L == 1

    def test_keep_all(self):
        C, L = solve_threshold([0.2, 0.3, 0.5], 4)
        assert C == KEEP_ALL and L == 3

    def test_few_positive_weights_keep_all(self):
        C, _ = solve_threshold([0.5, 0.0, 0.5, 0.0], 2)
        assert C == KEEP_ALL

    def test_all_zero(self):
        with pytest.raises(ValueError):
            solve_threshold([0.0, 0.0], 1)

    def test_unnormalised_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            solve_threshold([0.5, 0.6], 1)

    @given(seed=st.integers(0, 2**32 - 1), M=st.integers(2, 60), N=st.integers(1, 40))
    @settings(max_examples=200, deadline=None)
    def test_threshold_sum_equals_n(self, seed, M, N):
        w = _weights(seed, M)
        C, L = solve_threshold(w, N)
        if C == KEEP_ALL:
            assert np.count_nonzero(w) <= N
            return
        assert abs(np.minimum(1.0, C * w).sum() - N) <= 1e-9 * N
        assert L == np.count_nonzero(w > 1.0 / C)


class TestStratifiedResample:
    def test_strata(self, rng):
        for _ in range(2000):
            s = stratified_resample([0.25] * 4, 2, rng)
            assert len(s) == 2
            assert s[0] in (0, 1) and s[1] in (2, 3)

    def test_zero_weight_never_survives(self, rng):
        w = [0.3, 0.0, 0.3, 0.4]
        for _ in range(2000):
            assert 1 not in stratified_resample(w, 2, rng)

    def test_marginal_frequency(self, rng):
        n = 100_000
        hits = sum(int(stratified_resample([0.3, 0.7], 1, rng)[0] == 1) for _ in range(n))
        assert abs(binomial_z(hits, n, 0.7)) < 3

    def test_too_many_survivors(self, rng):
        with pytest.raises(ValueError):
            stratified_resample([0.5, 0.5], 3, rng)


class TestOptimalResample:
    @given(seed=st.integers(0, 2**32 - 1), M=st.integers(3, 40), N=st.integers(1, 20))
    @settings(max_examples=150, deadline=None)
    def test_invariants(self, seed, M, N):
        w = _weights(seed, M)
        rng = np.random.default_rng(seed)
        surv, lfac, C, L = optimal_resample(w, N, rng)
        assert np.all(np.diff(surv) > 0)
        if C == KEEP_ALL:
            np.testing.assert_array_equal(surv, np.flatnonzero(w > 0) if np.count_nonzero(w) < M else np.arange(M))
            return
        assert surv.size == N
        maintained = np.flatnonzero(w > 1.0 / C)
        assert set(maintained) <= set(surv)
        # maintained children keep W, stratified ones are divided by C W
        expect = np.where(w[surv] > 1.0 / C, np.log(w[surv]), -math.log(C))
        np.testing.assert_allclose(lfac, expect, rtol=1e-12)

    def test_survival_probabilities(self, rng):
        w = _weights(7, 9)
        N, n = 4, 100_000
        C, _ = solve_threshold(w, N)
        hits = np.zeros(w.size)
        for _ in range(n):
            hits[optimal_resample(w, N, rng)[0]] += 1
        p = np.minimum(1.0, C * w)
        z = [binomial_z(h, n, q) for h, q in zip(hits, p)]
        assert max(abs(v) for v in z) < 3.5


class TestDpfRun:
    def test_exact_regime_t3(self, rng):
        for _ in range(10):
            model, theta, y = random_instance(rng, 3, dz=2)
            exact = enumerate_posterior(model, theta, y)
            out = dpf_run(model, theta, y, 8, rng)
            assert out.log_evidence == pytest.approx(exact.log_marginal, rel=1e-10)

    def test_weights_normalised(self, rng):
        model, theta, y = random_instance(rng, 12, K=3, dz=2)
        out = dpf_run(model, theta, y, 5, rng)
        for n in range(1, 13):
            assert out.weights(n).sum() == pytest.approx(1.0, abs=1e-9)

    def test_log_evidence_is_sum_of_increments(self, rng):
        model, theta, y = random_instance(rng, 10, dz=1)
        out = dpf_run(model, theta, y, 3, rng)
        for n, sysn in enumerate(out.systems):
            assert out.log_increments[n] == pytest.approx(logsumexp(sysn.log_unnorm_weights))
        assert out.log_evidence == pytest.approx(out.log_increments.sum())

    @given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 3), N=st.integers(1, 6), polya=st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_support_invariants(self, seed, K, N, polya):
        rng = np.random.default_rng(seed)
        T = 7
        model, theta, y = random_instance(rng, T, K=K, dz=1, polya=polya)
        out = dpf_run(model, theta, y, N, rng)
        prev = None
        for n in range(1, T + 1):
            paths = out.paths(n)
            assert len(paths) == min(N * K, K**n)
            idx = path_index(paths, K)
            assert np.all(np.diff(idx) > 0)  # distinct and lexicographic
            if prev is not None:
                # every prefix was alive at n - 1: discarded prefixes never come back
                assert set(path_index(paths[:, :-1], K)) <= prev
            prev = set(idx)

    def test_maintained_survive(self, rng):
        model, theta, y = random_instance(rng, 15, K=3, dz=1)
        out = dpf_run(model, theta, y, 4, rng)
        for t in range(out.T - 1):
            W = np.exp(out.logw[t, : out.sizes[t]])
            C = out.thresholds[t]
            parents = set(out.parents[t + 1, : out.sizes[t + 1]])
            assert set(np.flatnonzero(W > 1.0 / C)) <= parents
            if np.isfinite(C):
                assert len(parents) == 4
                assert out.n_maintained[t] == np.count_nonzero(W > 1.0 / C)

    def test_seed_reproducible(self):
        model, theta, y = tiny_toy(20)
        a = dpf_run(model, theta, y, 5, np.random.default_rng(1))
        b = dpf_run(model, theta, y, 5, np.random.default_rng(1))
        assert a.log_evidence == b.log_evidence
        np.testing.assert_array_equal(a.states, b.states)

    def test_degenerate(self):
        # z is pinned at 0 with tiny observation noise: the second observation has density 0 under both regimes
        mats = (np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1), np.array([[1e-100]]), np.zeros((1, 1)), np.zeros((1, 1)))
        model = ModelSpec(2, lambda th, x: mats, (np.zeros(1), np.zeros((1, 1))))
        th = Theta({}, trans_matrix=np.full((2, 2), 0.5))
        with pytest.raises(DegenerateFilterError, match="time 2"):
            dpf_run(model, th, [0.0, 1e200], 2, np.random.default_rng(0))
        # with no observation noise at all the innovation variance itself vanishes
        pinned = (*mats[:3], np.zeros((1, 1)), *mats[4:])
        model = ModelSpec(2, lambda th, x: pinned, (np.zeros(1), np.zeros((1, 1))))
        with pytest.raises(DegenerateFilterError, match="time 1"):
            dpf_run(model, th, [0.0, 1.0], 2, np.random.default_rng(0))

    def test_store_for_backward(self, rng):
        model, theta, y = random_instance(rng, 5, dz=2)
        out = dpf_run(model, theta, y, 3, rng, store_for_backward=True)
        assert out.stored_for_backward
        s = out.system(5)
        assert s.means.shape == (len(s), 2) and s.threshold is None

    def test_unbiased(self, rng):
        model, theta, y = random_instance(rng, 8, dz=1)
        exact = enumerate_posterior(model, theta, y)
        R = 10_000
        ratio = np.exp([dpf_run(model, theta, y, 2, rng).log_evidence - exact.log_marginal for _ in range(R)])
        assert abs(ratio.mean() - 1.0) < 3 * ratio.std(ddof=1) / math.sqrt(R)


class TestSamplePath:
    def test_certain_path(self, rng):
        # a single feasible regime at each step: y_n = 3 is impossible under x = 0
        mats = {
            0: (np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1), np.array([[1e-3]]), np.zeros((1, 1)), np.zeros((1, 1))),
            1: (np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1), np.array([[1e-3]]), np.array([[3.0]]), np.zeros((1, 1))),
        }
        model = ModelSpec(2, lambda th, x: mats[x], (np.zeros(1), np.zeros((1, 1))), inputs=np.ones((3, 1)))
        th = Theta({}, trans_matrix=np.full((2, 2), 0.5))
        out = dpf_run(model, th, [3.0, 0.0, 3.0], 4, rng)
        for _ in range(50):
            np.testing.assert_array_equal(sample_path(out, rng), [1, 0, 1])

    def test_frequencies_match_weights(self, rng):
        model, theta, y = random_instance(rng, 6, dz=1)
        out = dpf_run(model, theta, y, 4, rng)
        W = out.weights(6)
        n = 100_000
        idx = path_index(np.array([sample_path(out, rng) for _ in range(n)]), 2)
        lookup = {k: i for i, k in enumerate(path_index(out.paths(6), 2))}
        counts = np.bincount([lookup[k] for k in idx], minlength=W.size)
        assert max(abs(binomial_z(c, n, p)) for c, p in zip(counts, W)) < 3.5

    def test_exact_regime_matches_oracle(self, rng):
        model, theta, y = random_instance(rng, 4, dz=2)
        exact = enumerate_posterior(model, theta, y)
        out = dpf_run(model, theta, y, 16, rng)
        n = 50_000
        freq = empirical(path_index(np.array([sample_path(out, rng) for _ in range(n)]), 2), 16)
        z = [binomial_z(f * n, n, p) for f, p in zip(freq, exact.table)]
        assert max(abs(v) for v in z) < 4


def test_trace_paths_roundtrip():
    states = np.array([[0, 1, -1, -1], [0, 1, 0, 1]])
    parents = np.array([[-1, -1, -1, -1], [0, 0, 1, 1]])
    np.testing.assert_array_equal(trace_paths(states, parents, 1, [1, 2]), [[0, 1], [1, 0]])
