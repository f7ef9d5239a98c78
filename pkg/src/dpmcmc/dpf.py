"""Discrete particle filter.

The support at time n is a set of distinct paths x_{1:n}.  Each step keeps
the paths whose weight exceeds 1/C (C solving sum min(1, C W) = N), selects
the rest by stratified resampling, and extends every survivor by all K
states, running one Kalman update per child.  The product of the summed
unnormalised weights is an unbiased estimate of p(y_{1:T}); it is exact when
K^T <= N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import _backend
from ._core_py import DegenerateFilterError
from .model import ModelSpec, ModelTables, Theta

__all__ = [
    "KEEP_ALL",
    "DegenerateFilterError",
    "ParticleSystem",
    "DpfOutput",
    "solve_threshold",
    "stratified_resample",
    "optimal_resample",
    "dpf_run",
    "sample_path",
    "trace_paths",
]

#: Threshold value meaning "no resampling, every particle survives".
KEEP_ALL = math.inf


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {w.sum():.12g}, expected 1")
    return w


def solve_threshold(weights, N: int):
    """Optimal resampling threshold.

    Returns ``(C, L)`` where C solves ``sum(min(1, C w)) = N`` and L counts
    the weights strictly above 1/C.  ``C`` is :data:`KEEP_ALL` when at most
    N weights are given (or at most N are positive).
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    w = _check_weights(weights)
    if not np.any(w > 0):
        raise DegenerateFilterError("all weights are zero")
    return _backend.core.solve_threshold(w, int(N))


def stratified_resample(ordered_weights, num_survivors: int, rng) -> np.ndarray:
    """Stratified selection of ``num_survivors`` distinct items.

    The weights are renormalised; item i survives when a point of the grid
    U_1 + (j-1)/n falls in (Q(i-1), Q(i)].  Requires every renormalised
    weight to be at most 1/num_survivors for the survivors to be distinct,
    which holds for the residual set of the optimal threshold.
    """
    w = np.asarray(ordered_weights, dtype=float)
    if num_survivors < 1 or num_survivors > w.size:
        raise ValueError(f"cannot select {num_survivors} survivors from {w.size} items")
    if not w.sum() > 0:
        raise ValueError("all weights are zero")
    u = 1.0 - rng.random()
    return np.unique(_backend.core.stratified_indices(w, int(num_survivors), u))


def optimal_resample(weights, N: int, rng, kappa: int = -1):
    """Full threshold resampling step of a normalised weight vector.

    Returns ``(survivors, log_factor, C, L)``.  ``log_factor`` is
    log(W / min(1, C W)) of each survivor, the correction applied to its
    children's weights.  With ``kappa >= 0`` that item is forced to survive.
    """
    w = _check_weights(weights)
    return _backend.core.optimal_resample(w, int(N), 1.0 - rng.random(), int(kappa))


@dataclass(frozen=True, eq=False)
class ParticleSystem:
    """Support set S_n of the filter at time n (1-based)."""

    time: int
    paths: np.ndarray
    log_unnorm_weights: np.ndarray
    weights: np.ndarray
    threshold: Optional[float]
    num_maintained: Optional[int]
    means: Optional[np.ndarray] = None
    covs: Optional[np.ndarray] = None

    def __len__(self):
        return self.paths.shape[0]


def trace_paths(states: np.ndarray, parents: np.ndarray, t: int, idx) -> np.ndarray:
    """Full paths x_{1:t+1} of particles ``idx`` stored at time index ``t``."""
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    out = np.empty((idx.size, t + 1), dtype=np.int64)
    for s in range(t, -1, -1):
        out[:, s] = states[s, idx]
        idx = parents[s, idx]
    return out


@dataclass(frozen=True, eq=False)
class DpfOutput:
    """Result of one filter run.

    Per-time arrays are padded to the largest support size; ``sizes[t]``
    gives the number of live particles at time index t.
    """

    sizes: np.ndarray
    states: np.ndarray
    parents: np.ndarray
    lwbar: np.ndarray
    logw: np.ndarray
    log_increments: np.ndarray
    thresholds: np.ndarray
    n_maintained: np.ndarray
    kappa: np.ndarray
    means: Optional[np.ndarray]
    covs: Optional[np.ndarray]
    counts: Optional[np.ndarray]
    N: int
    tables: ModelTables
    y: np.ndarray

    @property
    def T(self) -> int:
        return self.sizes.shape[0]

    @property
    def log_evidence(self) -> float:
        """log of the estimate of p(y_{1:T})."""
        return float(self.log_increments.sum())

    @property
    def stored_for_backward(self) -> bool:
        return self.means is not None

    def weights(self, n: int) -> np.ndarray:
        """Normalised weights W_n of the time-n support (n is 1-based)."""
        t = n - 1
        return np.exp(self.logw[t, : self.sizes[t]])

    def paths(self, n: int) -> np.ndarray:
        t = n - 1
        return trace_paths(self.states, self.parents, t, np.arange(self.sizes[t]))

    def system(self, n: int) -> ParticleSystem:
        t = n - 1
        M = self.sizes[t]
        last = t == self.T - 1
        return ParticleSystem(
            time=n,
            paths=self.paths(n),
            log_unnorm_weights=self.lwbar[t, :M].copy(),
            weights=self.weights(n),
            threshold=None if last else float(self.thresholds[t]),
            num_maintained=None if last else int(self.n_maintained[t]),
            means=None if self.means is None else self.means[t, :M],
            covs=None if self.covs is None else self.covs[t, :M],
        )

    @property
    def systems(self) -> List[ParticleSystem]:
        return [self.system(n) for n in range(1, self.T + 1)]


def _prepare_y(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("observations must be a non-empty (T,) or (T, dy) array")
    return np.ascontiguousarray(y)


def _run(tab: ModelTables, y: np.ndarray, N: int, rng, store: bool, ref) -> DpfOutput:
    if N < 1:
        raise ValueError("N must be at least 1")
    if y.shape[1] != tab.y_dim:
        raise ValueError(f"observations have dimension {y.shape[1]}, model expects {tab.y_dim}")
    T = y.shape[0]
    uniforms = 1.0 - rng.random(T)
    kern = _backend.kernels_for(tab)
    yk = y[:, 0].copy() if kern is not _backend._core_py else y
    kwargs = {"trans_fn": tab.trans_fn} if tab.trans_fn is not None else {}
    out = kern.forward(
        tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, yk, tab.m0, tab.P0, tab.log_nu,
        tab.trans_kind, tab.trans_param, int(N), uniforms, ref, bool(store), **kwargs,
    )
    return DpfOutput(
        sizes=out["sizes"], states=out["states"], parents=out["parents"], lwbar=out["lwbar"],
        logw=out["logw"], log_increments=out["log_incr"], thresholds=out["thresholds"],
        n_maintained=out["n_maint"], kappa=out["kappa"], means=out["means"], covs=out["covs"],
        counts=out["counts"], N=int(N), tables=tab, y=y,
    )


_NO_REF = np.zeros(0, dtype=np.int64)


def dpf_run(
    model: ModelSpec,
    theta: Theta,
    y,
    N: int,
    rng,
    store_for_backward: bool = False,
    tables: Optional[ModelTables] = None,
) -> DpfOutput:
    """Run the discrete particle filter with at most N survivors per step.

    Raises :class:`DegenerateFilterError` when every particle weight
    vanishes at some time step.
    """
    y = _prepare_y(y)
    tab = tables if tables is not None else model.tables(theta, y.shape[0])
    return _run(tab, y, N, rng, store_for_backward, _NO_REF)


def sample_path(output: DpfOutput, rng) -> np.ndarray:
    """Draw one path x_{1:T} from the final weights W_T."""
    t = output.T - 1
    lw = output.logw[t, : output.sizes[t]]
    cum = np.cumsum(np.exp(lw - lw.max()))
    i = int(np.searchsorted(cum, (1.0 - rng.random()) * cum[-1], side="left"))
    i = min(i, lw.size - 1)
    return trace_paths(output.states, output.parents, t, i)[0]
