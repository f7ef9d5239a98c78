"""Exact inference by brute force on tiny instances.

Everything here is deliberately independent of the filtering kernels: the
posterior over X^T is obtained by running one Kalman filter per path
(batched over paths), and the Gaussian densities used to check the Kalman
and backward recursions are assembled from the explicit linear map between
the noise variables and (z, y).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .model import ModelSpec, ModelTables, Theta, path_log_prior

__all__ = [
    "ExactPosterior",
    "MAX_PATHS",
    "enumerate_paths",
    "enumerate_posterior",
    "posterior_marginals",
    "joint_gaussian_loglik",
    "smoothing_moments",
    "future_loglik_given_state",
]

#: Largest number of paths the enumeration accepts.
MAX_PATHS = 10**6

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class ExactPosterior:
    """Posterior probability of every path in X^T, in lexicographic order."""

    table: np.ndarray
    log_marginal: float
    paths: np.ndarray
    log_joint: np.ndarray

    @property
    def T(self) -> int:
        return self.paths.shape[1]

    def prob(self, path: Sequence[int]) -> float:
        K = int(self.paths.max()) + 1 if self.paths.size else 0
        idx = 0
        for x in path:
            idx = idx * K + int(x)
        return float(self.table[idx])


def enumerate_paths(K: int, T: int) -> np.ndarray:
    """All K^T paths as rows, in lexicographic order."""
    if K**T > MAX_PATHS:
        raise OverflowError(f"{K}^{T} paths exceed the enumeration limit of {MAX_PATHS}")
    return np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64).reshape(K**T, T)


def _batched_loglik(tab: ModelTables, paths: np.ndarray, y: np.ndarray) -> np.ndarray:
    """log p(y_{1:T} | x_{1:T}) for every row of ``paths``."""
    Pn, T = paths.shape
    dz = tab.z_dim
    m = np.broadcast_to(tab.m0, (Pn, dz)).copy()
    P = np.broadcast_to(tab.P0, (Pn, dz, dz)).copy()
    total = np.zeros(Pn)
    for n in range(T):
        x = paths[:, n]
        A, C = tab.A[x], tab.C[x]
        mp = np.einsum("pij,pj->pi", A, m) + tab.fu[n, x]
        Pp = A @ P @ np.swapaxes(A, 1, 2) + tab.Q[x]
        S = C @ Pp @ np.swapaxes(C, 1, 2) + tab.R[x]
        e = y[n][None] - np.einsum("pij,pj->pi", C, mp) - tab.gu[n, x]
        PCt = Pp @ np.swapaxes(C, 1, 2)
        Kg = np.swapaxes(np.linalg.solve(S, np.swapaxes(PCt, 1, 2)), 1, 2)
        m = mp + np.einsum("pij,pj->pi", Kg, e)
        P = Pp - Kg @ S @ np.swapaxes(Kg, 1, 2)
        P = 0.5 * (P + np.swapaxes(P, 1, 2))
        sign, logdet = np.linalg.slogdet(S)
        quad = np.einsum("pi,pi->p", e, np.linalg.solve(S, e[..., None])[..., 0])
        ll = -0.5 * (y.shape[1] * LOG_2PI + logdet + quad)
        total += np.where(sign > 0, ll, -np.inf)
    return total


def _batched_log_prior(model: ModelSpec, theta: Theta, paths: np.ndarray) -> np.ndarray:
    K = model.num_states
    with np.errstate(divide="ignore"):
        lp = np.log(model.initial_probs(theta))[paths[:, 0]]
        if model.transition is not None:
            return np.array([path_log_prior(model, theta, p) for p in paths])
        if theta.marginalized:
            counts = np.zeros((paths.shape[0], K, K))
            rows = np.arange(paths.shape[0])
            for n in range(1, paths.shape[1]):
                np.add.at(counts, (rows, paths[:, n - 1], paths[:, n]), 1.0)
            a = theta.dirichlet_alpha
            ar = a.sum(axis=1)
            lp = lp + (gammaln(a + counts) - gammaln(a)).sum(axis=(1, 2))
            return lp - (gammaln(ar + counts.sum(axis=2)) - gammaln(ar)).sum(axis=1)
        logP = np.log(theta.trans_matrix)
        return lp + logP[paths[:, :-1], paths[:, 1:]].sum(axis=1)


def enumerate_posterior(model: ModelSpec, theta: Theta, y, chunk: int = 65536) -> ExactPosterior:
    """Exact p(x_{1:T} | y_{1:T}) over every path, and log p(y_{1:T})."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T = y.shape[0]
    paths = enumerate_paths(model.num_states, T)
    tab = model.tables(theta, T)
    lj = np.empty(paths.shape[0])
    for s in range(0, paths.shape[0], chunk):
        sl = slice(s, s + chunk)
        lj[sl] = _batched_loglik(tab, paths[sl], y) + _batched_log_prior(model, theta, paths[sl])
    lz = float(logsumexp(lj))
    return ExactPosterior(table=np.exp(lj - lz), log_marginal=lz, paths=paths, log_joint=lj)


def posterior_marginals(exact: ExactPosterior, num_states: Optional[int] = None) -> np.ndarray:
    """(T, K) array of p(X_n = k | y_{1:T})."""
    K = num_states if num_states is not None else int(exact.paths.max()) + 1
    T = exact.T
    out = np.zeros((T, K))
    for n in range(T):
        out[n] = np.bincount(exact.paths[:, n], weights=exact.table, minlength=K)
    return out


# -- explicit joint Gaussian -------------------------------------------------


def _design(tab: ModelTables, path, P0, offset: int = 0):
    """Linear map from noises eps = (z0 - m0, v_1.., w_1..) to (z_{0:T}, y_{1:T}).

    Returns means, loadings and the noise covariance.  ``offset`` shifts the
    time index into the input tables.
    """
    T = len(path)
    dz = tab.z_dim
    dy = tab.y_dim
    dv, dw = tab.B.shape[2], tab.D.shape[2]
    ne = dz + T * (dv + dw)
    cov_e = np.eye(ne)
    cov_e[:dz, :dz] = P0
    mz = np.zeros((T + 1, dz))
    Lz = np.zeros((T + 1, dz, ne))
    my = np.zeros((T, dy))
    Ly = np.zeros((T, dy, ne))
    mz[0] = tab.m0
    Lz[0, :, :dz] = np.eye(dz)
    for n in range(T):
        x = int(path[n])
        t = n + offset
        mz[n + 1] = tab.A[x] @ mz[n] + tab.fu[t, x]
        Lz[n + 1] = tab.A[x] @ Lz[n]
        v0 = dz + n * dv
        Lz[n + 1][:, v0:v0 + dv] += tab.B[x]
        my[n] = tab.C[x] @ mz[n + 1] + tab.gu[t, x]
        Ly[n] = tab.C[x] @ Lz[n + 1]
        w0 = dz + T * dv + n * dw
        Ly[n][:, w0:w0 + dw] += tab.D[x]
    return mz.reshape(-1), Lz.reshape((T + 1) * dz, ne), my.reshape(-1), Ly.reshape(T * dy, ne), cov_e


def _mvn_logpdf(x, mean, cov) -> float:
    cov = 0.5 * (cov + cov.T)
    L = np.linalg.cholesky(cov)
    a = np.linalg.solve(L, x - mean)
    return float(-0.5 * (x.size * LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + a @ a))


def joint_gaussian_loglik(model: ModelSpec, theta: Theta, path, y) -> float:
    """log p(y_{1:T} | x_{1:T}) from the explicit covariance of the stacked observations."""
    y = np.asarray(y, dtype=float).reshape(len(path), -1)
    tab = model.tables(theta, len(path))
    _, _, my, Ly, ce = _design(tab, path, tab.P0)
    return _mvn_logpdf(y.reshape(-1), my, Ly @ ce @ Ly.T)


def smoothing_moments(model: ModelSpec, theta: Theta, path, y):
    """Mean (T+1, dz) and covariance ((T+1) dz square) of z_{0:T} given y_{1:T}, x_{1:T}."""
    y = np.asarray(y, dtype=float).reshape(len(path), -1)
    T = len(path)
    tab = model.tables(theta, T)
    mz, Lz, my, Ly, ce = _design(tab, path, tab.P0)
    Syy = Ly @ ce @ Ly.T
    Szy = Lz @ ce @ Ly.T
    G = np.linalg.solve(Syy, Szy.T).T
    mean = mz + G @ (y.reshape(-1) - my)
    cov = Lz @ ce @ Lz.T - G @ Szy.T
    return mean.reshape(T + 1, tab.z_dim), 0.5 * (cov + cov.T)


def future_loglik_given_state(model: ModelSpec, theta: Theta, future_path, future_y, z_n, n: int = 0) -> float:
    """log p(y_{n+1:T} | z_n, x_{n+1:T}) for a known z_n.

    ``n`` is the number of observations before the future block (used for
    the input tables only).
    """
    fut = list(future_path)
    T = n + len(fut)
    tab = model.tables(theta, T)
    z_n = np.atleast_1d(np.asarray(z_n, dtype=float))
    tab0 = ModelTables(**{**tab.__dict__, "m0": z_n})
    _, _, my, Ly, ce = _design(tab0, fut, np.zeros((tab.z_dim, tab.z_dim)), offset=n)
    yv = np.asarray(future_y, dtype=float).reshape(-1)
    return _mvn_logpdf(yv, my, Ly @ ce @ Ly.T)
