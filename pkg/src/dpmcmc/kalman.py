"""Kalman filtering conditional on a discrete path."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _backend
from .model import ModelSpec, ModelTables, Theta

#: Relative pivot below which a covariance factorisation warns before clamping.
PSD_WARN_TOL = 1e-8

__all__ = [
    "GaussianBelief",
    "PredictiveStats",
    "KalmanError",
    "kalman_step",
    "kalman_update",
    "filter_path",
    "conditional_loglik",
    "ffbs_continuous",
]

LOG_2PI = math.log(2.0 * math.pi)
_DET_FLOOR = 1e-300


class KalmanError(ArithmeticError):
    """Singular innovation covariance."""


def _sym(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    kind: str = "filtered"

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        S = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", _sym(S))


@dataclass(frozen=True, eq=False)
class PredictiveStats:
    mean: np.ndarray
    cov: np.ndarray
    loglik: float


def kalman_update(tab: ModelTables, n: int, x: int, m: np.ndarray, P: np.ndarray, y: np.ndarray):
    """One predict/update step of the filter for state ``x`` at time index ``n``.

    Returns ``(m_filt, P_filt, m_pred, P_pred, y_mean, y_cov, loglik)``.
    """
    A, C = tab.A[x], tab.C[x]
    mp = A @ m + tab.fu[n, x]
    Pp = _sym(A @ P @ A.T + tab.Q[x])
    ym = C @ mp + tab.gu[n, x]
    S = _sym(C @ Pp @ C.T + tab.R[x])
    e = np.atleast_1d(y) - ym
    if S.shape == (1, 1):
        s = S[0, 0]
        if not s > _DET_FLOOR:
            raise KalmanError(f"innovation variance {s:.3g} is not positive (state {x}, time index {n})")
        k = (Pp @ C.T)[:, 0] / s
        mf = mp + k * e[0]
        Pf = _sym(Pp - np.outer(k, k) * s)
        ll = -0.5 * (LOG_2PI + math.log(s) + e[0] * e[0] / s)
    else:
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise KalmanError(f"innovation covariance not positive definite (state {x}, time index {n})") from exc
        PCt = Pp @ C.T
        Kt = np.linalg.solve(L.T, np.linalg.solve(L, PCt.T))
        mf = mp + Kt.T @ e
        Pf = _sym(Pp - PCt @ Kt)
        a = np.linalg.solve(L, e)
        ll = -0.5 * (e.size * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + a @ a)
    return mf, Pf, mp, Pp, ym, S, ll


def kalman_step(
    model: ModelSpec,
    theta: Theta,
    prev: GaussianBelief,
    x: int,
    y,
    u: Optional[np.ndarray] = None,
):
    """Advance a filtered belief at n-1 through state ``x`` and observation ``y``.

    Returns the filtered belief at n and the one-step predictive statistics.
    """
    tab = model.tables(theta, 1) if u is None else _tables_with_input(model, theta, u)
    mf, Pf, _, _, ym, S, ll = kalman_update(tab, 0, int(x), prev.mean, prev.cov, np.atleast_1d(y))
    return GaussianBelief(mf, Pf, "filtered"), PredictiveStats(ym, S, float(ll))


def _tables_with_input(model: ModelSpec, theta: Theta, u) -> ModelTables:
    tab = model.tables(theta, 1)
    K = model.num_states
    mats = [model.matrices(theta, x) for x in range(K)]
    u = np.atleast_1d(np.asarray(u, dtype=float))
    fu = np.stack([np.atleast_2d(m[4]) @ u for m in mats])[None]
    gu = np.stack([np.atleast_2d(m[5]) @ u for m in mats])[None]
    return ModelTables(**{**tab.__dict__, "fu": fu, "gu": gu})


def _as_2d(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def filter_path(tab: ModelTables, path: Sequence[int], y):
    """Run the filter along a fixed path.

    Returns filtered means (T+1, dz), covariances (T+1, dz, dz) with the prior
    at index 0, and the per-step predictive log-likelihoods (T,).
    """
    y = _as_2d(y)
    T = y.shape[0]
    dz = tab.z_dim
    ms = np.empty((T + 1, dz))
    Ps = np.empty((T + 1, dz, dz))
    lls = np.empty(T)
    ms[0], Ps[0] = tab.m0, tab.P0
    for n in range(T):
        ms[n + 1], Ps[n + 1], *_, lls[n] = kalman_update(tab, n, int(path[n]), ms[n], Ps[n], y[n])
    return ms, Ps, lls


def conditional_loglik(model: ModelSpec, theta: Theta, path: Sequence[int], y) -> float:
    """log p_theta(y_{1:T} | x_{1:T}) as a sum of predictive log-densities."""
    y = _as_2d(y)
    if len(path) != y.shape[0]:
        raise ValueError(f"path length {len(path)} does not match {y.shape[0]} observations")
    tab = model.tables(theta, y.shape[0])
    return float(filter_path(tab, path, y)[2].sum())


def _psd_factor(S: np.ndarray, what: str) -> np.ndarray:
    w, V = np.linalg.eigh(_sym(S))
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -1e-8 * scale:
        warnings.warn(f"{what}: clamping eigenvalue {w.min():.3g} to zero", RuntimeWarning, stacklevel=3)
    return V * np.sqrt(np.clip(w, 0.0, None))


def ffbs_continuous(model: ModelSpec, theta: Theta, path: Sequence[int], y, rng, tables: Optional[ModelTables] = None):
    """Draw z_{0:T} from p_theta(z_{0:T} | y_{1:T}, x_{1:T}).

    Forward filtering followed by backward simulation.  Singular
    predictive covariances (noise-free components) are handled with the
    generalised inverse of a pivot-truncated LDL' factorisation.
    """
    y = _as_2d(y)
    T = y.shape[0]
    tab = tables if tables is not None else model.tables(theta, T)
    normals = rng.standard_normal((T + 1, tab.z_dim))
    path = np.asarray(path, dtype=np.int64)
    kern = _backend.kernels_for(tab)
    yk = y[:, 0] if kern is not _backend._core_py else y
    z, min_piv = kern.ffbs(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, yk, tab.m0, tab.P0, path, normals)
    if min_piv < -PSD_WARN_TOL:
        warnings.warn(f"smoothing covariance has a negative pivot {min_piv:.3g}; clamped to zero", RuntimeWarning)
    return z
