"""Switching linear-Gaussian state-space models.

A model is a finite discrete process X_n on {0, ..., K-1} driving the
matrices of a linear Gaussian system

    Z_n = A(X_n) Z_{n-1} + B(X_n) V_n + F(X_n) u_n
    Y_n = C(X_n) Z_n     + D(X_n) W_n + G(X_n) u_n

with Z_0 ~ N(m0, P0) and standard normal V_n, W_n.  States are labelled
with 0-based integers; paths are ordered lexicographically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import gammaln

__all__ = [
    "Theta",
    "ModelSpec",
    "ModelTables",
    "Trajectory",
    "MARKOV",
    "POLYA",
    "GENERIC",
    "transition_prob",
    "transition_probs",
    "path_log_prior",
    "transition_counts",
    "simulate",
]

# transition encodings understood by the filtering kernels
MARKOV = 0
POLYA = 1
GENERIC = 2

_ROW_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Theta:
    """Static parameters of a switching model.

    Parameters
    ----------
    params : mapping
        Named real parameters (``phi``, ``sigma2``, ...).
    trans_matrix : array_like, optional
        Row-stochastic K x K matrix of the Markov chain.
    trans_weights : array_like, optional
        Unnormalised positive row components; the transition matrix is
        their row-normalisation.  Used by random-walk proposals on P_X.
    dirichlet_alpha : array_like, optional
        Dirichlet pseudo-counts of each row.  With ``marginalized=True`` the
        transition matrix is integrated out and X_n follows the Polya urn
        predictive.
    marginalized : bool
        Whether the transition matrix is integrated out.
    """

    params: Mapping[str, float] = field(default_factory=dict)
    trans_matrix: Optional[np.ndarray] = None
    trans_weights: Optional[np.ndarray] = None
    dirichlet_alpha: Optional[np.ndarray] = None
    marginalized: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "params", MappingProxyType({k: float(v) for k, v in dict(self.params).items()})
        )
        if self.trans_weights is not None:
            g = np.asarray(self.trans_weights, dtype=float)
            if g.ndim != 2 or g.shape[0] != g.shape[1] or np.any(g < 0) or np.any(g.sum(axis=1) <= 0):
                raise ValueError("trans_weights must be a square matrix of non-negative rows")
            object.__setattr__(self, "trans_weights", _frozen(g))
            if self.trans_matrix is None:
                object.__setattr__(self, "trans_matrix", g / g.sum(axis=1, keepdims=True))
        if self.trans_matrix is not None:
            P = np.asarray(self.trans_matrix, dtype=float)
            if P.ndim != 2 or P.shape[0] != P.shape[1]:
                raise ValueError(f"transition matrix must be square, got shape {P.shape}")
            if np.any(P < 0):
                raise ValueError("transition matrix has negative entries")
            bad = np.abs(P.sum(axis=1) - 1.0) > _ROW_TOL
            if np.any(bad):
                raise ValueError(f"transition matrix rows {np.flatnonzero(bad).tolist()} do not sum to 1")
            object.__setattr__(self, "trans_matrix", _frozen(P))
        if self.dirichlet_alpha is not None:
            a = np.asarray(self.dirichlet_alpha, dtype=float)
            if a.ndim != 2 or a.shape[0] != a.shape[1] or np.any(a <= 0):
                raise ValueError("dirichlet_alpha must be a square matrix of positive pseudo-counts")
            object.__setattr__(self, "dirichlet_alpha", _frozen(a))
        if self.marginalized:
            if self.dirichlet_alpha is None:
                raise ValueError("marginalized transitions need dirichlet_alpha")
            if self.trans_matrix is not None:
                raise ValueError("a marginalized Theta cannot also carry a transition matrix")

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def replace(self, **params) -> "Theta":
        """Copy with some continuous parameters changed."""
        new = dict(self.params)
        new.update(params)
        return Theta(
            new,
            trans_matrix=None if self.trans_weights is not None else self.trans_matrix,
            trans_weights=self.trans_weights,
            dirichlet_alpha=self.dirichlet_alpha,
            marginalized=self.marginalized,
        )

    def with_transitions(self, trans_matrix=None, trans_weights=None) -> "Theta":
        return Theta(
            self.params,
            trans_matrix=trans_matrix,
            trans_weights=trans_weights,
            dirichlet_alpha=self.dirichlet_alpha,
            marginalized=False,
        )

    def __repr__(self):
        parts = [f"{k}={v:.6g}" for k, v in self.params.items()]
        if self.marginalized:
            parts.append("P_X=marginalized")
        elif self.trans_matrix is not None:
            parts.append(f"P_X={np.round(self.trans_matrix, 4).tolist()}")
        return f"Theta({', '.join(parts)})"


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Discrete path, optional continuous states z_{0:T}, observations y_{1:T}."""

    discrete: np.ndarray
    observations: np.ndarray
    continuous: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.discrete, dtype=np.int64)
        y = np.asarray(self.observations, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError("discrete path and observations must have equal length")
        if self.continuous is not None and np.shape(self.continuous)[0] != x.shape[0] + 1:
            raise ValueError("continuous states must have length T + 1")
        object.__setattr__(self, "discrete", x)
        object.__setattr__(self, "observations", y)

    @property
    def T(self) -> int:
        return self.discrete.shape[0]


@dataclass(frozen=True, eq=False)
class ModelTables:
    """Per-state matrices of a model evaluated at one parameter value.

    ``Q = B B^T`` and ``R = D D^T``; ``fu[n, x] = F(x) u_n`` and
    ``gu[n, x] = G(x) u_n``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    fu: np.ndarray
    gu: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    log_nu: np.ndarray
    trans_kind: int
    trans_param: np.ndarray
    trans_fn: Optional[Callable[[Sequence[int]], np.ndarray]] = None

    @property
    def num_states(self) -> int:
        return self.A.shape[0]

    @property
    def z_dim(self) -> int:
        return self.A.shape[1]

    @property
    def y_dim(self) -> int:
        return self.C.shape[1]


def _uniform_initial(theta: Theta, K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A switching linear-Gaussian model family.

    Parameters
    ----------
    num_states : int
        Cardinality K of the discrete state space.
    matrices : callable
        ``matrices(theta, x) -> (A, B, C, D, F, G)`` for state ``x``.
    init_belief : tuple or callable
        ``(m0, P0)`` or ``init_belief(theta) -> (m0, P0)``.
    initial_dist : callable, optional
        ``initial_dist(theta) -> nu`` over states; uniform by default.
    transition : callable, optional
        ``transition(theta, history) -> probabilities`` for a non-Markov
        process.  When omitted the transition matrix (or its Polya-urn
        marginalisation) carried by ``Theta`` is used.
    inputs : array_like, optional
        Exogenous inputs u_{1:T}, shape (T, du).
    param_bounds : mapping, optional
        ``name -> (low, high)`` validity region of each parameter (closed).
    conjugate_update : callable, optional
        ``conjugate_update(model, theta, priors, path, z, y, rng) -> Theta``
        drawing the continuous parameters from their full conditional.
    """

    num_states: int
    matrices: Callable[[Theta, int], tuple]
    init_belief: object
    initial_dist: Optional[Callable[[Theta], np.ndarray]] = None
    transition: Optional[Callable[[Theta, Sequence[int]], np.ndarray]] = None
    inputs: Optional[np.ndarray] = None
    param_bounds: Mapping[str, tuple] = field(default_factory=dict)
    conjugate_update: Optional[Callable] = None
    conjugate_needs_z: bool = False
    name: str = "custom"

    def __post_init__(self):
        if int(self.num_states) < 2:
            raise ValueError("a switching model needs at least two discrete states")
        if self.inputs is not None:
            u = np.asarray(self.inputs, dtype=float)
            if u.ndim == 1:
                u = u[:, None]
            object.__setattr__(self, "inputs", _frozen(u))

    # -- parameters -----------------------------------------------------

    def theta(self, params=None, **kwargs) -> Theta:
        """Build a validated :class:`Theta` for this model."""
        th = Theta(params or {}, **kwargs)
        self.check_theta(th)
        return th

    def check_theta(self, theta: Theta) -> None:
        for name, (lo, hi) in self.param_bounds.items():
            if name not in theta.params:
                raise ValueError(f"{self.name}: missing parameter {name!r}")
            v = theta.params[name]
            if not (lo <= v <= hi):
                raise ValueError(f"{self.name}: parameter {name}={v} outside [{lo}, {hi}]")
        K = self.num_states
        for mat in (theta.trans_matrix, theta.dirichlet_alpha):
            if mat is not None and mat.shape != (K, K):
                raise ValueError(f"{self.name}: transition parameters must be {K}x{K}")
        if self.transition is None and theta.trans_matrix is None and not theta.marginalized:
            raise ValueError(f"{self.name}: Theta carries no transition matrix")

    def in_support(self, theta: Theta) -> bool:
        try:
            self.check_theta(theta)
        except ValueError:
            return False
        return True

    def initial_probs(self, theta: Theta) -> np.ndarray:
        if self.initial_dist is None:
            return _uniform_initial(theta, self.num_states)
        nu = np.asarray(self.initial_dist(theta), dtype=float)
        if nu.shape != (self.num_states,) or abs(nu.sum() - 1.0) > _ROW_TOL:
            raise ValueError("initial distribution must be a probability vector over the states")
        return nu

    def prior_moments(self, theta: Theta):
        mb = self.init_belief(theta) if callable(self.init_belief) else self.init_belief
        m0 = np.atleast_1d(np.asarray(mb[0], dtype=float))
        P0 = np.atleast_2d(np.asarray(mb[1], dtype=float))
        if P0.shape != (m0.size, m0.size):
            raise ValueError("initial covariance does not match the initial mean")
        return m0, 0.5 * (P0 + P0.T)

    # -- tabulation -----------------------------------------------------

    def tables(self, theta: Theta, T: int) -> ModelTables:
        """Evaluate all per-state quantities needed by the filters."""
        K = self.num_states
        mats = [tuple(np.atleast_2d(np.asarray(m, dtype=float)) for m in self.matrices(theta, x)) for x in range(K)]
        A, B, C, D, F, G = (np.stack([m[i] for m in mats]) for i in range(6))
        dz = A.shape[1]
        dy = C.shape[1]
        if A.shape[1:] != (dz, dz) or B.shape[1] != dz or C.shape[2] != dz or D.shape[1] != dy:
            raise ValueError(f"{self.name}: inconsistent matrix dimensions across states")
        m0, P0 = self.prior_moments(theta)
        if m0.size != dz:
            raise ValueError(f"{self.name}: initial mean has dimension {m0.size}, expected {dz}")
        if self.inputs is not None:
            u = self.inputs
            if u.shape[0] < T:
                raise ValueError(f"{self.name}: {u.shape[0]} inputs for {T} observations")
            u = u[:T]
            fu = np.einsum("kij,tj->tki", F, u)
            gu = np.einsum("kij,tj->tki", G, u)
        else:
            fu = np.zeros((T, K, dz))
            gu = np.zeros((T, K, dy))
        with np.errstate(divide="ignore"):
            log_nu = np.log(self.initial_probs(theta))
        trans_fn = None
        if self.transition is not None:
            kind, param = GENERIC, np.zeros((K, K))
            trans_fn = lambda hist, _th=theta: np.asarray(self.transition(_th, hist), dtype=float)  # noqa: E731
        elif theta.marginalized:
            kind, param = POLYA, np.array(theta.dirichlet_alpha)
        else:
            kind = MARKOV
            with np.errstate(divide="ignore"):
                param = np.log(theta.trans_matrix)
        Q = np.einsum("kij,klj->kil", B, B)
        R = np.einsum("kij,klj->kil", D, D)
        return ModelTables(
            A=A, B=B, C=C, D=D, Q=0.5 * (Q + Q.transpose(0, 2, 1)), R=0.5 * (R + R.transpose(0, 2, 1)),
            fu=np.ascontiguousarray(fu), gu=np.ascontiguousarray(gu), m0=m0, P0=P0,
            log_nu=log_nu, trans_kind=kind, trans_param=np.ascontiguousarray(param), trans_fn=trans_fn,
        )


# -- discrete process -----------------------------------------------------


def transition_counts(path: Sequence[int], K: int) -> np.ndarray:
    """K x K matrix of transition counts along ``path``."""
    c = np.zeros((K, K), dtype=np.int64)
    p = np.asarray(path, dtype=np.int64)
    if p.size > 1:
        np.add.at(c, (p[:-1], p[1:]), 1)
    return c


def transition_probs(model: ModelSpec, theta: Theta, history: Sequence[int]) -> np.ndarray:
    """Distribution of X_n given the prefix x_{1:n-1} (``history``).

    An empty history gives the initial distribution.
    """
    K = model.num_states
    hist = [int(h) for h in history]
    for h in hist:
        if not 0 <= h < K:
            raise ValueError(f"state {h} outside 0..{K - 1}")
    if not hist:
        return model.initial_probs(theta)
    if model.transition is not None:
        p = np.asarray(model.transition(theta, hist), dtype=float)
    elif theta.marginalized:
        prev = hist[-1]
        counts = transition_counts(hist, K)[prev]
        alpha = theta.dirichlet_alpha[prev]
        p = (alpha + counts) / (alpha.sum() + counts.sum())
    else:
        p = np.array(theta.trans_matrix[hist[-1]])
    return p


def transition_prob(model: ModelSpec, theta: Theta, history: Sequence[int], x: int) -> float:
    """f_theta(x | history)."""
    if not 0 <= int(x) < model.num_states:
        raise ValueError(f"state {x} outside 0..{model.num_states - 1}")
    return float(transition_probs(model, theta, history)[int(x)])


def _polya_log_joint(alpha: np.ndarray, counts: np.ndarray) -> float:
    """log prob of a transition sequence with the given counts under Dirichlet rows."""
    a_row = alpha.sum(axis=1)
    c_row = counts.sum(axis=1)
    return float(
        np.sum(gammaln(alpha + counts) - gammaln(alpha))
        - np.sum(gammaln(a_row + c_row) - gammaln(a_row))
    )


def path_log_prior(model: ModelSpec, theta: Theta, path: Sequence[int]) -> float:
    """log p_theta(x_{1:T}) of a whole discrete path."""
    p = np.asarray(path, dtype=np.int64)
    with np.errstate(divide="ignore"):
        lp = float(np.log(model.initial_probs(theta)[p[0]]))
    if model.transition is not None:
        for n in range(1, p.size):
            pr = transition_prob(model, theta, p[:n], p[n])
            lp += math.log(pr) if pr > 0 else -math.inf
        return lp
    K = model.num_states
    if theta.marginalized:
        return lp + _polya_log_joint(theta.dirichlet_alpha, transition_counts(p, K))
    with np.errstate(divide="ignore"):
        return lp + float(np.sum(np.log(theta.trans_matrix[p[:-1], p[1:]])))


# -- simulation -----------------------------------------------------------


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate(model: ModelSpec, theta: Theta, T: int, seed) -> Trajectory:
    """Draw (x_{1:T}, z_{0:T}, y_{1:T}) from the model; deterministic in ``seed``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    model.check_theta(theta)
    rng = np.random.default_rng(seed)
    tab = model.tables(theta, T)
    K = model.num_states
    x = np.empty(T, dtype=np.int64)
    x[0] = rng.choice(K, p=model.initial_probs(theta))
    counts = np.zeros((K, K))
    for n in range(1, T):
        if model.transition is not None:
            p = transition_probs(model, theta, x[:n])
        elif theta.marginalized:
            a = theta.dirichlet_alpha[x[n - 1]] + counts[x[n - 1]]
            p = a / a.sum()
        else:
            p = theta.trans_matrix[x[n - 1]]
        x[n] = rng.choice(K, p=p)
        counts[x[n - 1], x[n]] += 1
    dz, dy = tab.z_dim, tab.y_dim
    z = np.empty((T + 1, dz))
    y = np.empty((T, dy))
    z[0] = tab.m0 + _psd_sqrt(tab.P0) @ rng.standard_normal(dz)
    for n in range(T):
        k = x[n]
        v = rng.standard_normal(tab.B.shape[2])
        w = rng.standard_normal(tab.D.shape[2])
        z[n + 1] = tab.A[k] @ z[n] + tab.B[k] @ v + tab.fu[n, k]
        y[n] = tab.C[k] @ z[n + 1] + tab.D[k] @ w + tab.gu[n, k]
    return Trajectory(discrete=x, observations=y, continuous=z)
