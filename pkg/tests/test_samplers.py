import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from dpmcmc.models import toy, toy_priors, toy_theta
from dpmcmc.oracle import enumerate_posterior
from dpmcmc.samplers import (
    ChainState,
    Flat,
    GaussianRW,
    GridMove,
    InverseGamma,
    LogMixtureRW,
    LogRW,
    Normal,
    PriorSpec,
    ProposalSpec,
    acceptance_probability,
    conjugate_update_theta,
    gerlach_gibbs_sweep,
    gerlach_site_conditionals,
    pg_init,
    pg_step,
    pmmh_init,
    pmmh_step,
)

from helpers import binomial_z, empirical, path_index, random_instance, tiny_toy, total_variation


class TestAcceptance:
    def test_double_evidence(self):
        assert acceptance_probability(math.log(2.0), 0.0, -1.0, -1.0) == 1.0

    def test_half_evidence(self):
        assert acceptance_probability(math.log(0.5), 0.0, -1.0, -1.0) == pytest.approx(0.5)

    def test_outside_support(self):
        assert acceptance_probability(0.0, 0.0, -math.inf, 0.0) == 0.0
        assert acceptance_probability(-math.inf, 0.0, 0.0, 0.0) == 0.0

    @given(a=st.floats(-1e6, 1e6), b=st.floats(-1e6, 1e6), c=st.floats(-1e3, 1e3), d=st.floats(-1e3, 1e3),
           q=st.floats(-50, 50))
    def test_in_unit_interval(self, a, b, c, d, q):
        assert 0.0 <= acceptance_probability(a, b, c, d, q) <= 1.0


class TestPriors:
    def test_truncated_normal(self):
        p = Normal(0.0, 1.0, -1.0, 1.0)
        assert p.logpdf(1.5) == -math.inf
        # unnormalised inside the bounds
        assert p.logpdf(0.3) == pytest.approx(stats.norm.logpdf(0.3))

    def test_inverse_gamma(self):
        assert InverseGamma(2.0, 3.0).logpdf(1.7) == pytest.approx(stats.invgamma.logpdf(1.7, 2.0, scale=3.0))
        with pytest.raises(ValueError):
            InverseGamma(0.0, 1.0)

    def test_dirichlet_matrix(self):
        th = toy_theta(trans_matrix=((0.6, 0.4), (0.3, 0.7)))
        alpha = np.array([[2.0, 3.0], [1.0, 1.0]])
        lp = PriorSpec({}, dirichlet=alpha).log_density(th)
        ref = stats.dirichlet.logpdf([0.6, 0.4], alpha[0]) + stats.dirichlet.logpdf([0.3, 0.7], alpha[1])
        assert lp == pytest.approx(ref)


class TestProposals:
    def test_log_rw_ratio(self, rng):
        y, lq = LogRW(0.3).propose(2.0, rng)
        assert lq == pytest.approx(math.log(y / 2.0))

    def test_mixture_validation(self):
        with pytest.raises(ValueError):
            LogMixtureRW((0.5, 0.4), (0.1, 1.0))
        with pytest.raises(ValueError):
            GaussianRW(0.0)

    def test_mixture_component_frequencies(self, rng):
        mix = LogMixtureRW((0.9, 0.1), (0.01, 3.0))
        steps = np.array([abs(math.log(mix.propose(1.0, rng)[0])) for _ in range(20_000)])
        assert abs(binomial_z(np.count_nonzero(steps > 0.1), 20_000, 0.1 * 2 * stats.norm.sf(0.1 / 3.0))) < 4

    def test_unknown_block_name(self):
        with pytest.raises(ValueError):
            ProposalSpec({"a": GaussianRW(0.1)}, blocks=[["b"]])

    def test_transition_weights_move(self, rng):
        th = toy_theta()
        spec = ProposalSpec({"P_X": LogRW(0.1)})
        from dpmcmc.samplers import _with_weights

        new, lq = spec.propose(_with_weights(th), ("P_X",), rng)
        np.testing.assert_allclose(new.trans_matrix.sum(axis=1), 1.0)
        assert lq == pytest.approx(np.log(new.trans_weights / th.trans_matrix).sum())


class TestPmmh:
    def test_rejected_state_unchanged(self, rng):
        model, theta, y = tiny_toy(5)
        priors = PriorSpec({"sigma2_y": Flat(0.0, 1.0)})
        proposal = ProposalSpec({"sigma2_y": GridMove((10.0,))})
        state = pmmh_init(model, theta, y, 4, rng)
        new = pmmh_step(state, model, priors, proposal, y, 4, rng)
        assert new.theta is state.theta
        assert new.log_evidence == state.log_evidence
        np.testing.assert_array_equal(new.path, state.path)
        assert new.iteration == 1 and new.accepted == (False,)

    def test_needs_cached_evidence(self, rng):
        model, theta, y = tiny_toy(3)
        with pytest.raises(ValueError):
            pmmh_step(ChainState(theta, np.zeros(3, dtype=int)), model, toy_priors(),
                      ProposalSpec({"a": GaussianRW(0.1)}), y, 4, rng)

    def test_exact_regime_matches_ideal_mmh(self):
        # with N >= K^T the estimate is exact, so decisions coincide with MMH on the same random stream
        model, theta, y = tiny_toy(4, seed=2)
        priors = PriorSpec({"sigma2_y": InverseGamma(3.0, 1.0), "a": Normal(0.0, 1.0, -1.0, 1.0)})
        proposal = ProposalSpec({"sigma2_y": LogRW(0.4), "a": GaussianRW(0.3)}, blocks=[["sigma2_y"], ["a"]])
        rng = np.random.default_rng(9)
        state = pmmh_init(model, theta, y, 16, rng)
        ref_rng = np.random.default_rng(9)
        ref_rng.random(5)
        ref_theta = state.theta
        ref_lev = enumerate_posterior(model, ref_theta, y).log_marginal
        assert state.log_evidence == pytest.approx(ref_lev, rel=1e-10)
        decisions, ref_decisions = [], []
        for _ in range(300):
            state = pmmh_step(state, model, priors, proposal, y, 16, rng)
            decisions.extend(state.accepted)
            for block in proposal.blocks:
                prop, lq = proposal.propose(ref_theta, block, ref_rng)
                lp_new = priors.log_density(prop) if model.in_support(prop) else -math.inf
                ok = False
                if lp_new > -math.inf:
                    ref_rng.random(5)  # filter uniforms and the path draw
                    lev_new = enumerate_posterior(model, prop, y).log_marginal
                    alpha = acceptance_probability(lev_new, ref_lev, lp_new, priors.log_density(ref_theta), lq)
                    ok = ref_rng.random() < alpha
                if ok:
                    ref_theta, ref_lev = prop, lev_new
                ref_decisions.append(ok)
        assert decisions == ref_decisions
        assert 0 < sum(decisions) < len(decisions)
        assert state.theta["a"] == ref_theta["a"]

    def test_grid_posterior(self, rng):
        model, theta, y = tiny_toy(4, seed=4)
        grid = (0.2, 0.35, 0.5, 0.8, 1.2)
        priors = PriorSpec({"sigma2_y": Flat(0.0, math.inf)})
        proposal = ProposalSpec({"sigma2_y": GridMove(grid)})
        lm = np.array([enumerate_posterior(model, theta.replace(sigma2_y=g), y).log_marginal for g in grid])
        target = np.exp(lm - lm.max())
        target /= target.sum()
        tab_idx = {g: i for i, g in enumerate(grid)}
        state = pmmh_init(model, theta.replace(sigma2_y=grid[0]), y, 4, rng)
        R = 20_000
        hits = np.zeros(5)
        for _ in range(R):
            state = pmmh_step(state, model, priors, proposal, y, 4, rng)
            hits[tab_idx[state.theta["sigma2_y"]]] += 1
        assert total_variation(hits / R, target) < 0.03


class TestConjugate:
    def _path(self):
        # from state 0: five 0->0 and three 0->1 transitions; from state 1: two 1->0
        return np.array([0, 0, 0, 0, 0, 0, 1, 0, 1, 0, 1])

    def test_dirichlet_posterior(self, rng):
        model, theta = toy(), toy_theta()
        path = self._path()
        T = path.size
        priors = PriorSpec({"sigma2_y": InverseGamma(3.0, 1.0)}, dirichlet=np.ones((2, 2)))
        z, y = np.zeros((T + 1, 1)), np.zeros(T)
        R = 100_000
        p = np.array([conjugate_update_theta(model, priors, path, z, y, rng, theta).trans_matrix[:, 0]
                      for _ in range(R)])
        # Dir(6, 4) for row 0 and Dir(3, 1) for row 1
        for col, (a, b) in zip(p.T, [(6, 4), (3, 1)]):
            mean = a / (a + b)
            sd = math.sqrt(a * b / ((a + b) ** 2 * (a + b + 1)))
            assert abs(col.mean() - mean) < 3 * sd / math.sqrt(R)
            assert col.std() == pytest.approx(sd, rel=0.02)

    def test_inverse_gamma_posterior(self, rng):
        model, theta = toy(), toy_theta()
        T = 7
        y = rng.normal(size=T)
        z = np.zeros((T + 1, 1))
        z[1:, 0] = y + rng.normal(size=T) * 0.5
        a, b = 3.0, 1.0
        draws = [conjugate_update_theta(model, toy_priors(a, b), np.zeros(T, int), z, y, rng, theta)["sigma2_y"]
                 for _ in range(20_000)]
        ss = float(np.sum((y - z[1:, 0]) ** 2))
        # shape a + k/2 with k = T residuals
        assert stats.kstest(draws, stats.invgamma(a + T / 2, scale=b + ss / 2).cdf).pvalue > 1e-3

    def test_transition_matrix_held_without_dirichlet(self, rng):
        model, theta = toy(), toy_theta()
        new = conjugate_update_theta(model, toy_priors(), self._path(), np.zeros((12, 1)), np.zeros(11), rng, theta)
        np.testing.assert_array_equal(new.trans_matrix, theta.trans_matrix)

    def test_missing_z(self, rng):
        model, theta, y = tiny_toy(3)
        with pytest.raises(ValueError, match="needs the continuous states"):
            conjugate_update_theta(model, toy_priors(), [0, 1, 0], None, y, rng, theta)


class TestParticleGibbs:
    def test_invariance_from_posterior_draw(self, rng):
        model, theta, y = tiny_toy(4, seed=6)
        exact = enumerate_posterior(model, theta, y)
        tab = model.tables(theta, 4)
        R = 20_000
        start = rng.choice(16, size=R, p=exact.table)
        out = np.empty(R, dtype=np.int64)
        for i, s in enumerate(start):
            path = exact.paths[s]
            new = pg_step(ChainState(theta, path), model, None, y, 2, rng, update_theta=False, tables=tab)
            out[i] = path_index(new.path, 2)[0]
        freq = empirical(out, 16)
        for f, p in zip(freq, exact.table):
            assert abs(binomial_z(f * R, R, p)) < 4

    @pytest.mark.parametrize("use_backward", [True, False])
    def test_chain_targets_posterior(self, rng, use_backward):
        model, theta, y = tiny_toy(4, seed=6)
        exact = enumerate_posterior(model, theta, y)
        tab = model.tables(theta, 4)
        state = ChainState(theta, np.zeros(4, dtype=np.int64))
        R = 20_000
        idx = np.empty(R, dtype=np.int64)
        for i in range(R):
            state = pg_step(state, model, None, y, 2, rng, use_backward=use_backward, update_theta=False, tables=tab)
            idx[i] = path_index(state.path, 2)[0]
        assert total_variation(empirical(idx, 16), exact.table) < 0.035

    def test_polya_chain(self, rng):
        model, theta, y = random_instance(rng, 4, dz=1, polya=True)
        exact = enumerate_posterior(model, theta, y)
        state = ChainState(theta, np.zeros(4, dtype=np.int64))
        R = 20_000
        idx = np.empty(R, dtype=np.int64)
        for i in range(R):
            state = pg_step(state, model, None, y, 2, rng, update_theta=False)
            idx[i] = path_index(state.path, 2)[0]
        assert total_variation(empirical(idx, 16), exact.table) < 0.035

    def test_needs_two_particles(self, rng):
        model, theta, y = tiny_toy(3)
        with pytest.raises(ValueError):
            pg_step(ChainState(theta, np.zeros(3, dtype=int)), model, None, y, 1, rng, update_theta=False)

    def test_theta_update_draws_z(self, rng):
        model, theta, y = tiny_toy(6)
        state = pg_init(model, theta, y, 4, rng)
        assert state.z.shape == (7, 1)
        new = pg_step(state, model, toy_priors(), y, 4, rng)
        assert new.theta["sigma2_y"] != theta["sigma2_y"]
        assert new.z.shape == (7, 1) and new.iteration == 1


class TestGerlach:
    @pytest.mark.parametrize("polya", [False, True])
    def test_site_conditionals_exact(self, rng, polya):
        model, theta, y = random_instance(rng, 3, dz=2, polya=polya)
        exact = enumerate_posterior(model, theta, y)
        for s in range(8):
            path = exact.paths[s]
            conds = gerlach_site_conditionals(path, model, theta, y)
            np.testing.assert_allclose(conds.sum(axis=1), 1.0, atol=1e-12)
            for n in range(3):
                alt = np.repeat(path[None], 2, axis=0)
                alt[:, n] = [0, 1]
                p = exact.table[path_index(alt, 2)]
                np.testing.assert_allclose(conds[n], p / p.sum(), rtol=1e-6)

    def test_three_states(self, rng):
        model, theta, y = random_instance(rng, 3, K=3, dz=1)
        exact = enumerate_posterior(model, theta, y)
        path = exact.paths[11]
        conds = gerlach_site_conditionals(path, model, theta, y)
        alt = np.repeat(path[None], 3, axis=0)
        alt[:, 1] = [0, 1, 2]
        p = exact.table[path_index(alt, 3)]
        np.testing.assert_allclose(conds[1], p / p.sum(), rtol=1e-6)

    def test_sweep_chain(self, rng):
        model, theta, y = tiny_toy(4, seed=6)
        exact = enumerate_posterior(model, theta, y)
        tab = model.tables(theta, 4)
        path = np.zeros(4, dtype=np.int64)
        R = 20_000
        idx = np.empty(R, dtype=np.int64)
        for i in range(R):
            path = gerlach_gibbs_sweep(path, model, theta, y, rng, tables=tab)
            idx[i] = path_index(path, 2)[0]
        assert total_variation(empirical(idx, 16), exact.table) < 0.035

    def test_vector_observations_rejected(self, rng):
        model, theta, y = random_instance(rng, 3, dz=2, dy=2)
        with pytest.raises(ValueError, match="scalar"):
            gerlach_gibbs_sweep([0, 0, 0], model, theta, y, rng)
