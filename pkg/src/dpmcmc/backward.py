"""Backward potentials and backward sampling of discrete paths.

For a fixed future x'_{n+1:T} the likelihood of the remaining observations
as a function of z_n is an unnormalised Gaussian

    p(y_{n+1:T} | z_n, x'_{n+1:T}) ∝ exp(-(z' Xi_n z - 2 mu_n' z) / 2),

computed backwards from Xi_T = 0, mu_T = 0.  Integrating it against the
filtered belief N(m_n, S_n) of a particle gives the candidate-dependent part
of the backward weight.  Only scalar observations are supported.

The model-level functions here follow the square-root form of the
recursion literally and serve as the reference for the kernels, which use
an algebraically equivalent covariance form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import _backend
from ._core_py import DegenerateFilterError, backward_logweights
from .cdpf import ConditionedRun
from .dpf import DpfOutput, trace_paths
from .kalman import GaussianBelief, _psd_factor
from .model import ModelSpec, Theta, transition_counts

__all__ = [
    "BackwardPotential",
    "BackwardWeightSet",
    "ModelUnsupportedError",
    "backward_potential_step",
    "backward_loglik",
    "backward_weights",
    "backward_sample",
]


class ModelUnsupportedError(ValueError):
    """The model falls outside what the backward recursion handles."""


@dataclass(frozen=True, eq=False)
class BackwardPotential:
    """Quadratic-form coefficients (Xi_n, mu_n) of z_n."""

    xi: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        object.__setattr__(self, "xi", 0.5 * (xi + xi.T))
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))

    @classmethod
    def terminal(cls, z_dim: int) -> "BackwardPotential":
        return cls(np.zeros((z_dim, z_dim)), np.zeros(z_dim))


@dataclass(frozen=True, eq=False)
class BackwardWeightSet:
    """Normalised backward weights V_n over the particles stored at time n."""

    time: int
    paths: np.ndarray
    weights: np.ndarray
    log_unnorm: np.ndarray

    def __len__(self):
        return self.weights.size


def backward_potential_step(
    model: ModelSpec,
    theta: Theta,
    nxt: BackwardPotential,
    x_next: int,
    y_next: float,
    u_next=None,
) -> BackwardPotential:
    """(Xi_n, mu_n) from (Xi_{n+1}, mu_{n+1}), state x_{n+1} and observation y_{n+1}.

    Raises
    ------
    ModelUnsupportedError
        For vector observations, or when C B and D both vanish so the
        observation carries no noise (r = 0).
    """
    A, B, C, D, F, G = (np.atleast_2d(np.asarray(m, dtype=float)) for m in model.matrices(theta, int(x_next)))
    if C.shape[0] != 1:
        raise ModelUnsupportedError("backward recursion requires scalar observations")
    dz, dv, dw = A.shape[0], B.shape[1], D.shape[1]
    u = np.zeros(F.shape[1]) if u_next is None else np.atleast_1d(np.asarray(u_next, dtype=float))
    Fu, Gu = F @ u, float((G @ u)[0])
    y = float(np.asarray(y_next, dtype=float).reshape(-1)[0])
    Bn = np.hstack([B, np.zeros((dz, dw))])
    Dn = np.hstack([np.zeros((1, dv)), D])
    e = C @ Bn + Dn  # (1, v + w)
    r = float((e @ e.T)[0, 0])
    if not r > 0.0:
        raise ModelUnsupportedError(f"observation noise vanishes in state {x_next} (C B = 0 and D = 0)")
    Phi = (Bn @ e.T)[:, 0] / r
    proj = np.eye(dz) - np.outer(Phi, C[0])
    Lam = proj @ A
    a = proj @ Fu - Phi * Gu
    Gam = _psd_factor(Bn @ (np.eye(e.shape[1]) - e.T @ e / r) @ Bn.T, "backward noise factor")
    Xi, mu = nxt.xi, nxt.mu
    M = Gam.T @ Xi @ Gam + np.eye(dz)
    XiG = Xi @ Gam
    Xi_n = Lam.T @ (Xi - XiG @ np.linalg.solve(M, XiG.T)) @ Lam + np.outer(C[0] @ A, C[0] @ A) / r
    v = mu - Xi @ (a + Phi * y)
    mu_n = Lam.T @ (v - XiG @ np.linalg.solve(M, Gam.T @ v)) + (C[0] @ A) * (y - Gu - C[0] @ Fu) / r
    return BackwardPotential(Xi_n, mu_n)


def backward_loglik(potential: BackwardPotential, belief: GaussianBelief) -> float:
    """log p(y_{n+1:T} | y_{1:n}, x_{1:n}, x'_{n+1:T}) up to a candidate-independent constant.

    Every factor depending on the belief (including the determinant) is
    kept; the dropped constant depends only on (x'_{n+1:T}, y_{n+1:T}).
    """
    Xi, mu = potential.xi, potential.mu
    m = belief.mean
    U = _psd_factor(belief.cov, "filtered covariance factor")
    M = U.T @ Xi @ U + np.eye(U.shape[1])
    d = U.T @ (mu - Xi @ m)
    sign, logdet = np.linalg.slogdet(M)
    if sign <= 0:
        raise np.linalg.LinAlgError("backward likelihood matrix is not positive definite")
    return float(-0.5 * (m @ Xi @ m - 2.0 * mu @ m - d @ np.linalg.solve(M, d)) - 0.5 * logdet)


def _output_of(run: Union[ConditionedRun, DpfOutput]) -> DpfOutput:
    out = run.output if isinstance(run, ConditionedRun) else run
    if not out.stored_for_backward:
        raise ValueError("filter output lacks stored moments; run with store_for_backward=True")
    if out.tables.y_dim != 1:
        raise ModelUnsupportedError("backward sampling requires scalar observations")
    return out


def _check_noise(tab) -> None:
    e2 = np.einsum("kj,kjl,kl->k", tab.C[:, 0, :], tab.Q, tab.C[:, 0, :]) + tab.R[:, 0, 0]
    if np.any(~(e2 > 0)):
        raise ModelUnsupportedError("observation noise vanishes in some state (C B = 0 and D = 0)")


def backward_weights(run: Union[ConditionedRun, DpfOutput], future, n: Optional[int] = None) -> BackwardWeightSet:
    """Backward weights V_n of the time-n particles given the future x'_{n+1:T}.

    ``future`` holds x'_{n+1:T}; ``n`` defaults to T - len(future).  With an
    empty future the weights are the filter weights W_T.
    """
    out = _output_of(run)
    tab = out.tables
    T = out.T
    fut = np.asarray(future, dtype=np.int64)
    if n is None:
        n = T - fut.size
    if not 1 <= n <= T or fut.size != T - n:
        raise ValueError(f"future of length {fut.size} does not match time {n} of {T}")
    t = n - 1
    M = out.sizes[t]
    if fut.size == 0:
        lv = out.logw[t, :M].copy()
    else:
        _check_noise(tab)
        y = out.y[:, 0]
        K, dz = tab.num_states, tab.z_dim
        Xi, mu = np.zeros((dz, dz)), np.zeros(dz)
        for s in range(T - 1, t, -1):
            x1 = fut[s - t - 1]
            Xi, mu = _backend._core_py.potential_step(
                Xi, mu, tab.A[x1], tab.Q[x1], tab.C[x1, 0], tab.R[x1, 0, 0], tab.fu[s, x1], tab.gu[s, x1, 0], y[s]
            )
        d = transition_counts(fut, K).astype(float)
        lv = backward_logweights(
            tab.trans_kind, tab.trans_param, out.states, out.parents, out.logw,
            out.means, out.covs, out.counts, t, fut, d, Xi, mu, tab.trans_fn,
        )[:M]
    mx = lv.max()
    if not np.isfinite(mx):
        raise DegenerateFilterError(f"all backward weights are zero at time {n}")
    w = np.exp(lv - mx)
    w /= w.sum()
    return BackwardWeightSet(
        time=n, paths=trace_paths(out.states, out.parents, t, np.arange(M)), weights=w, log_unnorm=lv
    )


def backward_sample(run: Union[ConditionedRun, DpfOutput], model: ModelSpec, theta: Theta, rng) -> np.ndarray:
    """Draw x'_{1:T} by backward sampling through the stored supports.

    ``model`` and ``theta`` must be the ones the filter ran with; the
    tabulated matrices stored in the output are used.
    """
    out = _output_of(run)
    tab = out.tables
    if tab.num_states != model.num_states:
        raise ValueError("model does not match the filter output")
    T = out.T
    uniforms = 1.0 - rng.random(T)
    if T == 1:
        M = out.sizes[0]
        return out.states[0, _backend._core_py._categorical(out.logw[0, :M], uniforms[0])][None].copy()
    _check_noise(tab)
    kern = _backend.kernels_for(tab)
    y = out.y[:, 0].copy()
    counts = out.counts if out.counts is not None else np.zeros((1, 1, 1, 1), dtype=np.int32)
    kwargs = {"trans_fn": tab.trans_fn} if tab.trans_fn is not None else {}
    try:
        return kern.backward(
            tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, y, tab.trans_kind, tab.trans_param, out.sizes,
            out.states, out.parents, out.logw, out.means, out.covs, counts, uniforms, **kwargs,
        )
    except DegenerateFilterError as exc:
        raise DegenerateFilterError(f"backward sampling failed: {exc}") from exc

