"""Particle MCMC samplers and the one-at-a-time Gibbs baseline.

* :func:`pmmh_step` - particle marginal Metropolis-Hastings, optionally as a
  sequence of block updates.
* :func:`pg_step` - particle Gibbs: conjugate parameter draw, conditional
  DPF, then backward sampling (or a single draw from the final weights).
* :func:`gerlach_gibbs_sweep` - single-site Gibbs over x_1..x_T using the
  backward potentials, O(T) per sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln

from . import _backend
from .backward import backward_sample
from .cdpf import conditional_dpf_run
from .dpf import DegenerateFilterError, dpf_run, sample_path
from .kalman import KalmanError, ffbs_continuous, kalman_update
from .model import GENERIC, ModelSpec, ModelTables, Theta, _polya_log_joint, path_log_prior, transition_counts

__all__ = [
    "Normal",
    "InverseGamma",
    "Flat",
    "PriorSpec",
    "GaussianRW",
    "LogRW",
    "LogMixtureRW",
    "GridMove",
    "ProposalSpec",
    "ChainState",
    "acceptance_probability",
    "pmmh_init",
    "pmmh_step",
    "pg_init",
    "pg_step",
    "conjugate_update_theta",
    "gerlach_gibbs_sweep",
    "gerlach_site_conditionals",
    "TRANSITIONS",
]

#: Name under which proposals and priors address the transition matrix.
TRANSITIONS = "P_X"


# -- priors --------------------------------------------------------------------


@dataclass(frozen=True)
class Normal:
    """Gaussian prior N(mean, var), optionally truncated to [low, high].

    The truncated density is left unnormalised; the constant cancels in
    every Metropolis-Hastings ratio.
    """

    mean: float = 0.0
    var: float = 1.0
    low: float = -math.inf
    high: float = math.inf

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError("Normal prior needs a positive variance")
        if not self.low < self.high:
            raise ValueError("Normal prior truncation needs low < high")

    def logpdf(self, x: float) -> float:
        if not self.low <= x <= self.high:
            return -math.inf
        return -0.5 * (math.log(2 * math.pi * self.var) + (x - self.mean) ** 2 / self.var)

    def sample(self, rng) -> float:
        return _truncated_normal(self.mean, self.var, self.low, self.high, rng)


@dataclass(frozen=True)
class InverseGamma:
    """Inverse-gamma prior with density proportional to x^(-shape-1) exp(-scale/x)."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("inverse-gamma hyperparameters must be positive")

    def logpdf(self, x: float) -> float:
        if not x > 0:
            return -math.inf
        a, b = self.shape, self.scale
        return a * math.log(b) - math.lgamma(a) - (a + 1) * math.log(x) - b / x

    def sample(self, rng) -> float:
        return _inv_gamma(self.shape, self.scale, rng)


@dataclass(frozen=True)
class Flat:
    """Improper (or bounded uniform) prior."""

    low: float = -math.inf
    high: float = math.inf

    def logpdf(self, x: float) -> float:
        return 0.0 if self.low <= x <= self.high else -math.inf


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Independent priors on the named parameters and Dirichlet rows on P_X.

    ``constraint`` is an optional extra support condition on the whole
    parameter (e.g. stationarity of an autoregression).
    """

    params: Mapping[str, object] = field(default_factory=dict)
    dirichlet: Optional[np.ndarray] = None
    constraint: Optional[Callable[[Theta], bool]] = None

    def __post_init__(self):
        if self.dirichlet is not None:
            a = np.asarray(self.dirichlet, dtype=float)
            if a.ndim != 2 or np.any(a <= 0):
                raise ValueError("Dirichlet pseudo-counts must be a positive matrix")
            object.__setattr__(self, "dirichlet", a)

    def __getitem__(self, name):
        return self.params[name]

    def log_density(self, theta: Theta) -> float:
        """log p(theta); P_X enters through its rows or its unnormalised weights."""
        lp = 0.0
        for name, prior in self.params.items():
            lp += prior.logpdf(theta.params[name])
            if lp == -math.inf:
                return lp
        if self.constraint is not None and not self.constraint(theta):
            return -math.inf
        a = self.dirichlet
        if a is not None and not theta.marginalized:
            if theta.trans_weights is not None:
                g = theta.trans_weights
                if np.any(g <= 0):
                    return -math.inf
                # independent Gamma(a, 1) weights normalise to Dirichlet(a) rows
                lp += float(np.sum((a - 1.0) * np.log(g) - g - gammaln(a)))
            elif theta.trans_matrix is not None:
                P = theta.trans_matrix
                with np.errstate(divide="ignore", invalid="ignore"):
                    terms = np.where(a == 1.0, 0.0, (a - 1.0) * np.log(P))
                lp += float(np.sum(terms) + np.sum(gammaln(a.sum(axis=1))) - np.sum(gammaln(a)))
        return lp


def _inv_gamma(shape: float, scale: float, rng) -> float:
    return scale / rng.gamma(shape)


def _truncated_normal(mean: float, var: float, low: float, high: float, rng, max_tries: int = 10000) -> float:
    """Rejection from the untruncated normal; inverse-CDF when the region is improbable."""
    sd = math.sqrt(var)
    for _ in range(max_tries):
        x = mean + sd * rng.standard_normal()
        if low <= x <= high:
            return x
    from scipy.stats import truncnorm

    a, b = (low - mean) / sd, (high - mean) / sd
    return float(truncnorm.ppf(rng.random(), a, b, loc=mean, scale=sd))


# -- proposals -----------------------------------------------------------------


@dataclass(frozen=True)
class GaussianRW:
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("random-walk std must be positive")

    def propose(self, x: float, rng) -> Tuple[float, float]:
        """Return (x*, log q(x|x*) - log q(x*|x))."""
        return x + self.std * rng.standard_normal(), 0.0


@dataclass(frozen=True)
class LogRW:
    """Gaussian random walk on log x; the Jacobian enters the proposal ratio."""

    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("random-walk std must be positive")

    def propose(self, x: float, rng) -> Tuple[float, float]:
        y = x * math.exp(self.std * rng.standard_normal())
        return y, math.log(y) - math.log(x)


@dataclass(frozen=True)
class LogMixtureRW:
    """Mixture of log-domain Gaussian random walks (symmetric in log x)."""

    weights: Tuple[float, ...] = (0.9, 0.1)
    stds: Tuple[float, ...] = (0.05, 1.0)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.stds) or abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("mixture weights must be a probability vector matching the stds")
        if any(not s > 0 for s in self.stds):
            raise ValueError("mixture stds must be positive")

    def propose(self, x: float, rng) -> Tuple[float, float]:
        j = int(np.searchsorted(np.cumsum(self.weights), rng.random(), side="right"))
        sd = self.stds[min(j, len(self.stds) - 1)]
        y = x * math.exp(sd * rng.standard_normal())
        return y, math.log(y) - math.log(x)


@dataclass(frozen=True)
class GridMove:
    """Independent uniform proposal over a finite grid of values (symmetric)."""

    grid: Tuple[float, ...]

    def propose(self, x: float, rng) -> Tuple[float, float]:
        return float(self.grid[int(rng.integers(len(self.grid)))]), 0.0


@dataclass(frozen=True, eq=False)
class ProposalSpec:
    """Per-parameter moves grouped into Metropolis-within-Gibbs blocks.

    The name :data:`TRANSITIONS` applies its move to every unnormalised
    component of P_X.  Without explicit blocks all moves form one block.
    """

    moves: Mapping[str, object]
    blocks: Optional[Sequence[Sequence[str]]] = None

    def __post_init__(self):
        blocks = [list(self.moves)] if self.blocks is None else [list(b) for b in self.blocks]
        for b in blocks:
            for name in b:
                if name not in self.moves:
                    raise ValueError(f"block names unknown parameter {name!r}")
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in blocks))

    def propose(self, theta: Theta, block: Sequence[str], rng) -> Tuple[Theta, float]:
        params = dict(theta.params)
        weights = theta.trans_weights
        log_q = 0.0
        for name in block:
            move = self.moves[name]
            if name == TRANSITIONS:
                g = np.array(weights, dtype=float)
                for idx in np.ndindex(*g.shape):
                    g[idx], lq = move.propose(float(g[idx]), rng)
                    log_q += lq
                weights = g
            else:
                params[name], lq = move.propose(params[name], rng)
                log_q += lq
        new = Theta(
            params,
            trans_matrix=None if weights is not None else theta.trans_matrix,
            trans_weights=weights,
            dirichlet_alpha=theta.dirichlet_alpha,
            marginalized=theta.marginalized,
        )
        return new, log_q


# -- chain state -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChainState:
    """Current (theta, x_{1:T}) of a chain plus cached quantities."""

    theta: Theta
    path: np.ndarray
    log_evidence: Optional[float] = None
    z: Optional[np.ndarray] = None
    iteration: int = 0
    accepted: Tuple[bool, ...] = ()


def acceptance_probability(log_evidence_new: float, log_evidence_old: float, log_prior_new: float,
                           log_prior_old: float, log_q_ratio: float = 0.0) -> float:
    """1 ^ [p(y|theta*) p(theta*) q(theta|theta*)] / [p(y|theta) p(theta) q(theta*|theta)]."""
    num = log_evidence_new + log_prior_new
    if num == -math.inf or math.isnan(num):
        return 0.0
    la = num - (log_evidence_old + log_prior_old) + log_q_ratio
    return 1.0 if la >= 0 else math.exp(la)


def _with_weights(theta: Theta) -> Theta:
    if theta.marginalized or theta.trans_weights is not None or theta.trans_matrix is None:
        return theta
    return theta.with_transitions(trans_weights=np.array(theta.trans_matrix))


def pmmh_init(model: ModelSpec, theta: Theta, y, N: int, rng) -> ChainState:
    """Initial PMMH state: one filter run at ``theta`` to cache log p-hat."""
    theta = _with_weights(theta)
    out = dpf_run(model, theta, y, N, rng)
    return ChainState(theta=theta, path=sample_path(out, rng), log_evidence=out.log_evidence)


def pmmh_step(state: ChainState, model: ModelSpec, priors: PriorSpec, proposal: ProposalSpec, y, N: int,
              rng) -> ChainState:
    """One PMMH iteration: a sequence of block updates, each a full MH step.

    The estimate at the current point is cached and never recomputed; a
    rejected block leaves (theta, path, log_evidence) untouched.
    """
    if state.log_evidence is None or not math.isfinite(state.log_evidence):
        raise ValueError("PMMH state needs a finite cached log evidence")
    theta, path, lev = state.theta, state.path, state.log_evidence
    lp = priors.log_density(theta)
    accepted = []
    for block in proposal.blocks:
        prop, log_q = proposal.propose(theta, block, rng)
        lp_new = priors.log_density(prop) if model.in_support(prop) else -math.inf
        ok = False
        if lp_new > -math.inf:
            try:
                out = dpf_run(model, prop, y, N, rng)
                x_new = sample_path(out, rng)
                lev_new = out.log_evidence
            except (DegenerateFilterError, KalmanError, np.linalg.LinAlgError):
                lev_new = -math.inf
            alpha = acceptance_probability(lev_new, lev, lp_new, lp, log_q)
            ok = rng.random() < alpha
        if ok:
            theta, path, lev, lp = prop, x_new, lev_new, lp_new
        accepted.append(bool(ok))
    return ChainState(theta=theta, path=path, log_evidence=lev, z=None, iteration=state.iteration + 1,
                      accepted=tuple(accepted))


# -- conjugate updates and particle Gibbs ------------------------------------------


def conjugate_update_theta(model: ModelSpec, priors: PriorSpec, path, z, y, rng, theta: Theta) -> Theta:
    """Draw theta from its full conditional given (x, z, y).

    Explicit P_X rows are drawn from Dirichlet(alpha + transition counts)
    when the priors carry Dirichlet pseudo-counts (otherwise P_X is held
    fixed); the continuous parameters use the model's registered rule.
    """
    if model.conjugate_update is None:
        raise ValueError(f"{model.name}: no conjugate update rule registered")
    if model.conjugate_needs_z and z is None:
        raise ValueError(f"{model.name}: conjugate update needs the continuous states z")
    y = np.asarray(y, dtype=float)
    new = model.conjugate_update(model, theta, priors, np.asarray(path), z, y, rng)
    explicit = not theta.marginalized and theta.trans_matrix is not None and model.transition is None
    if explicit and priors.dirichlet is not None:
        post = priors.dirichlet + transition_counts(path, model.num_states)
        P = np.vstack([rng.dirichlet(row) for row in post])
        new = new.with_transitions(trans_matrix=P)
    return new


def pg_init(model: ModelSpec, theta: Theta, y, N: int, rng) -> ChainState:
    """Initial PG state: path from an unconditional filter run, z from FFBS if needed."""
    out = dpf_run(model, theta, y, N, rng)
    path = sample_path(out, rng)
    z = ffbs_continuous(model, theta, path, y, rng) if model.conjugate_needs_z else None
    return ChainState(theta=theta, path=path, z=z)


def pg_step(state: ChainState, model: ModelSpec, priors: Optional[PriorSpec], y, N: int, rng,
            use_backward: bool = True, update_theta: bool = True,
            tables: Optional[ModelTables] = None) -> ChainState:
    """One particle Gibbs iteration.

    theta | x, z (conjugate) -> conditional DPF given the current path ->
    new path by backward sampling (or from W_T) -> z | x, theta by FFBS.
    With ``update_theta=False`` theta stays fixed and ``tables`` may carry
    its precomputed matrices.
    """
    if N < 2:
        raise ValueError("particle Gibbs needs N >= 2")
    theta, z = state.theta, state.z
    if update_theta:
        if model.conjugate_needs_z and z is None:
            z = ffbs_continuous(model, theta, state.path, y, rng)
        theta = conjugate_update_theta(model, priors, state.path, z, y, rng, theta=theta)
        tables = None
    tab = tables if tables is not None else model.tables(theta, np.shape(y)[0])
    run = conditional_dpf_run(model, theta, y, N, state.path, rng, tables=tab)
    path = backward_sample(run, model, theta, rng) if use_backward else sample_path(run.output, rng)
    if update_theta and model.conjugate_needs_z:
        z = ffbs_continuous(model, theta, path, y, rng, tables=tab)
    return ChainState(theta=theta, path=path, z=z, iteration=state.iteration + 1, log_evidence=None)


# -- one-at-a-time Gibbs ------------------------------------------------------------


def _site_log_prior(model: ModelSpec, theta: Theta, tab: ModelTables, path: np.ndarray, n: int,
                    counts: Optional[np.ndarray]) -> np.ndarray:
    """log p(x_{1:T}) for every value of x_n, up to a constant shared across values."""
    K = model.num_states
    T = path.size
    out = np.empty(K)
    if tab.trans_kind == GENERIC:
        p = path.copy()
        for k in range(K):
            p[n] = k
            out[k] = path_log_prior(model, theta, p)
        return out
    if counts is None:
        lp = tab.trans_param
        out[:] = tab.log_nu if n == 0 else lp[path[n - 1]]
        if n + 1 < T:
            out += lp[:, path[n + 1]]
        return out
    for k in range(K):
        c = counts.copy()
        if n > 0:
            c[path[n - 1], path[n]] -= 1
            c[path[n - 1], k] += 1
        if n + 1 < T:
            c[path[n], path[n + 1]] -= 1
            c[k, path[n + 1]] += 1
        out[k] = _polya_log_joint(tab.trans_param, c)
    if n == 0:
        out += tab.log_nu
    return out


def _gerlach(path, model: ModelSpec, theta: Theta, y, rng, tables: Optional[ModelTables], collect: bool):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T = y.shape[0]
    x = np.array(path, dtype=np.int64)
    if x.shape != (T,):
        raise ValueError("path length does not match the observations")
    tab = tables if tables is not None else model.tables(theta, T)
    if tab.y_dim != 1:
        raise ValueError("one-at-a-time Gibbs requires scalar observations")
    K, dz = tab.num_states, tab.z_dim
    core = _backend.core
    Xi = np.zeros((T, dz, dz))
    mu = np.zeros((T, dz))
    for t in range(T - 2, -1, -1):
        k = x[t + 1]
        Xi[t], mu[t] = core.potential_step(Xi[t + 1], mu[t + 1], tab.A[k], tab.Q[k], tab.C[k, 0], tab.R[k, 0, 0],
                                           tab.fu[t + 1, k], tab.gu[t + 1, k, 0], y[t + 1, 0])
    polya = tab.trans_kind == 1
    counts = transition_counts(x, K).astype(float) if polya else None
    m, P = tab.m0, tab.P0
    conds = np.empty((T, K)) if collect else None
    mf = np.empty((K, dz))
    Pf = np.empty((K, dz, dz))
    ll = np.empty(K)
    for t in range(T):
        for k in range(K):
            mf[k], Pf[k], *_, ll[k] = kalman_update(tab, t, k, m, P, y[t])
        lv = ll + _site_log_prior(model, theta, tab, x, t, counts)
        if t < T - 1:
            lv = lv + core.backward_loglik_batch(mf, Pf, Xi[t], mu[t])
        lv = lv - lv.max()
        p = np.exp(lv)
        p /= p.sum()
        if collect:
            conds[t] = p
            k = x[t]
        else:
            k = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
            k = min(k, K - 1)
            if polya and k != x[t]:
                if t > 0:
                    counts[x[t - 1], x[t]] -= 1
                    counts[x[t - 1], k] += 1
                if t + 1 < T:
                    counts[x[t], x[t + 1]] -= 1
                    counts[k, x[t + 1]] += 1
            x[t] = k
        m, P = mf[k].copy(), Pf[k].copy()
    return conds if collect else x


def gerlach_gibbs_sweep(path, model: ModelSpec, theta: Theta, y, rng, tables: Optional[ModelTables] = None):
    """One systematic scan of single-site Gibbs updates x_1, ..., x_T.

    A backward pass along the current path gives the potentials of
    y_{n+1:T}; a forward Kalman pass then scores each candidate x_n as
    p(y_n | y_{1:n-1}, x_{1:n}) p(x_n | x_{-n}) p(y_{n+1:T} | y_{1:n}, x_{1:T}).
    """
    return _gerlach(path, model, theta, y, rng, tables, collect=False)


def gerlach_site_conditionals(path, model: ModelSpec, theta: Theta, y,
                              tables: Optional[ModelTables] = None) -> np.ndarray:
    """(T, K) full conditionals p(x_n | y, x_{-n}) at every site of a fixed path."""
    return _gerlach(path, model, theta, y, None, tables, collect=True)

