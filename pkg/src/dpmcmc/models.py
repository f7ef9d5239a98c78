"""Built-in switching models and their priors.

``example1``
    AR(1) around a level that shifts when x_n = 1; z = (y - mu, mu).
``example2``
    Piecewise-linear trend with two kinds of change point; z = (mu, slope).
``example3``
    Random walk observed in switching-variance AR(2) noise;
    z = (mu, eta_n, eta_{n-1}).
``toy``
    Scalar AR(1) with state-dependent innovation scale, observed in noise
    of unknown variance; small enough for exact enumeration.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .model import ModelSpec, Theta
from .samplers import InverseGamma, Normal, PriorSpec, _inv_gamma, _truncated_normal

__all__ = [
    "example1",
    "example1_theta",
    "example1_priors",
    "example2",
    "example2_theta",
    "example2_priors",
    "example3",
    "example3_theta",
    "example3_priors",
    "ar2_stationary",
    "toy",
    "toy_theta",
    "toy_priors",
    "BUILTIN",
]


def _ig_post(prior: InverseGamma, resid: np.ndarray, rng) -> float:
    return _inv_gamma(prior.shape + 0.5 * resid.size, prior.scale + 0.5 * float(resid @ resid), rng)


# -- example 1 -----------------------------------------------------------------


def _ex1_matrices(theta: Theta, x: int):
    phi, s = theta["phi"], math.sqrt(theta["sigma2"])
    A = np.array([[phi, 0.0], [0.0, 1.0]])
    B = s * np.array([[1.0, 0.0], [0.0, float(x)]])
    C = np.array([[1.0, 1.0]])
    D = np.zeros((1, 1))
    return A, B, C, D, np.zeros((2, 1)), np.zeros((1, 1))


def _ex1_conjugate(model, theta, priors, path, z, y, rng) -> Theta:
    e, mu = z[:, 0], z[:, 1]
    phi = theta["phi"]
    jumps = np.diff(mu)[np.asarray(path) == 1]
    s2 = _ig_post(priors["sigma2"], np.concatenate([e[1:] - phi * e[:-1], jumps]), rng)
    pr = priors["phi"]
    prec = 1.0 / pr.var + float(e[:-1] @ e[:-1]) / s2
    mean = (pr.mean / pr.var + float(e[1:] @ e[:-1]) / s2) / prec
    phi = _truncated_normal(mean, 1.0 / prec, pr.low, pr.high, rng)
    return theta.replace(phi=phi, sigma2=s2)


def example1(prior_var_mu0: float = 10.0, prior_var_dev0: float = 1.0) -> ModelSpec:
    """Autoregression with shifting level; x in {0, 1}, 1 meaning a level shift."""
    return ModelSpec(
        num_states=2,
        matrices=_ex1_matrices,
        init_belief=(np.zeros(2), np.diag([prior_var_dev0, prior_var_mu0])),
        param_bounds={"phi": (-1.0, 1.0), "sigma2": (1e-300, math.inf)},
        conjugate_update=_ex1_conjugate,
        conjugate_needs_z=True,
        name="example1",
    )


def example1_theta(phi: float = 0.1, sigma: float = 0.1, trans_matrix=((0.99, 0.01), (0.99, 0.01)),
                   marginalized: bool = False, alpha=None) -> Theta:
    if marginalized:
        a = np.ones((2, 2)) if alpha is None else alpha
        return Theta({"phi": phi, "sigma2": sigma**2}, dirichlet_alpha=a, marginalized=True)
    return Theta({"phi": phi, "sigma2": sigma**2}, trans_matrix=np.asarray(trans_matrix, dtype=float),
                 dirichlet_alpha=None if alpha is None else alpha)


def example1_priors() -> PriorSpec:
    return PriorSpec(
        {"phi": Normal(0.0, 10.0, -1.0, 1.0), "sigma2": InverseGamma(0.1, 0.1)},
        dirichlet=np.ones((2, 2)),
    )


# -- example 2 -----------------------------------------------------------------


def _ex2_matrices(delta: float):
    def matrices(theta: Theta, x: int):
        s0, s1 = math.sqrt(theta["sigma2_mu0"]), math.sqrt(theta["sigma2_mu1"])
        if x == 0:
            A, B = np.array([[1.0, delta], [0.0, 1.0]]), np.zeros((2, 2))
        elif x == 1:
            A, B = np.array([[1.0, delta], [0.0, 0.0]]), np.diag([0.0, s1])
        else:
            A, B = np.zeros((2, 2)), np.diag([s0, s1])
        C = np.array([[1.0, 0.0]])
        D = np.array([[math.sqrt(theta["sigma2_y"])]])
        return A, B, C, D, np.zeros((2, 1)), np.zeros((1, 1))

    return matrices


def _ex2_conjugate(model, theta, priors, path, z, y, rng) -> Theta:
    x = np.asarray(path)
    level, slope = z[1:, 0], z[1:, 1]
    s2y = _ig_post(priors["sigma2_y"], np.asarray(y, dtype=float).reshape(-1) - level, rng)
    s2m0 = _ig_post(priors["sigma2_mu0"], level[x == 2], rng)
    s2m1 = _ig_post(priors["sigma2_mu1"], slope[x >= 1], rng)
    return theta.replace(sigma2_y=s2y, sigma2_mu0=s2m0, sigma2_mu1=s2m1)


def example2(delta: float = 0.1, prior_var: Sequence[float] = (100.0, 100.0)) -> ModelSpec:
    """Change points in a piecewise-linear trend.

    x = 0 continues the line, x = 1 resets the slope, x = 2 resets level and
    slope.
    """
    return ModelSpec(
        num_states=3,
        matrices=_ex2_matrices(delta),
        init_belief=(np.zeros(2), np.diag(prior_var)),
        param_bounds={k: (1e-300, math.inf) for k in ("sigma2_y", "sigma2_mu0", "sigma2_mu1")},
        conjugate_update=_ex2_conjugate,
        conjugate_needs_z=True,
        name="example2",
    )


def example2_theta(sigma2_y: float = 1.0, sigma2_mu0: float = 4.0, sigma2_mu1: float = 1.0,
                   trans_matrix=None) -> Theta:
    P = np.array([[0.98, 0.01, 0.01], [0.98, 0.01, 0.01], [0.98, 0.01, 0.01]]) if trans_matrix is None \
        else np.asarray(trans_matrix, dtype=float)
    return Theta({"sigma2_y": sigma2_y, "sigma2_mu0": sigma2_mu0, "sigma2_mu1": sigma2_mu1}, trans_matrix=P)


def example2_priors(shape: float = 2.0, scale: float = 3.0) -> PriorSpec:
    ig = InverseGamma(shape, scale)
    return PriorSpec({"sigma2_y": ig, "sigma2_mu0": ig, "sigma2_mu1": ig}, dirichlet=np.ones((3, 3)))


# -- example 3 -----------------------------------------------------------------

ETA_NAMES = tuple(f"sigma2_eta{j}" for j in range(1, 5))


def _ex3_matrices(theta: Theta, x: int):
    A = np.array([[1.0, 0.0, 0.0], [0.0, theta["a1"], theta["a2"]], [0.0, 1.0, 0.0]])
    B = np.diag([math.sqrt(theta["sigma2_mu"]), math.sqrt(theta[ETA_NAMES[x]]), 0.0])
    C = np.array([[1.0, 1.0, 0.0]])
    return A, B, C, np.zeros((1, 1)), np.zeros((3, 1)), np.zeros((1, 1))


def ar2_stationary(theta: Theta) -> bool:
    """Stationarity triangle of an AR(2): |a2| < 1, a2 + a1 < 1, a2 - a1 < 1."""
    a1, a2 = theta["a1"], theta["a2"]
    return abs(a2) < 1.0 and a1 + a2 < 1.0 and a2 - a1 < 1.0


def example3(m0: Sequence[float] = (0.0, 0.0, 0.0), prior_var: Sequence[float] = (1.0, 0.01, 0.01)) -> ModelSpec:
    """Random walk in switching-variance AR(2) noise with four noise regimes."""
    bounds = {name: (1e-300, math.inf) for name in ("sigma2_mu",) + ETA_NAMES}
    bounds.update({"a1": (-2.0, 2.0), "a2": (-1.0, 1.0)})
    return ModelSpec(
        num_states=4,
        matrices=_ex3_matrices,
        init_belief=(np.asarray(m0, dtype=float), np.diag(prior_var)),
        param_bounds=bounds,
        name="example3",
    )


def example3_theta(sigma2_mu: float = 1e-4, sigma2_eta=(1e-4, 4e-4, 1.6e-3, 6.4e-3), a1: float = 0.5,
                   a2: float = 0.2, trans_matrix=None) -> Theta:
    params = {"sigma2_mu": sigma2_mu, "a1": a1, "a2": a2}
    params.update(dict(zip(ETA_NAMES, sigma2_eta)))
    P = np.full((4, 4), 0.02) + np.eye(4) * 0.92 if trans_matrix is None else np.asarray(trans_matrix, dtype=float)
    return Theta(params, trans_matrix=P)


def example3_priors(var_shape: float = 2.0, var_scale: float = 1e-3) -> PriorSpec:
    ig = InverseGamma(var_shape, var_scale)
    params = {"sigma2_mu": ig, "a1": Normal(0.0, 1.0), "a2": Normal(0.0, 1.0)}
    params.update({name: ig for name in ETA_NAMES})
    return PriorSpec(params, dirichlet=np.ones((4, 4)), constraint=ar2_stationary)


# -- toy model -----------------------------------------------------------------


def _toy_matrices(theta: Theta, x: int):
    s = theta["s0"] if x == 0 else theta["s1"]
    return (
        np.array([[theta["a"]]]),
        np.array([[s]]),
        np.array([[1.0]]),
        np.array([[math.sqrt(theta["sigma2_y"])]]),
        np.zeros((1, 1)),
        np.zeros((1, 1)),
    )


def _toy_conjugate(model, theta, priors, path, z, y, rng) -> Theta:
    resid = np.asarray(y, dtype=float).reshape(-1) - z[1:, 0]
    return theta.replace(sigma2_y=_ig_post(priors["sigma2_y"], resid, rng))


def toy(prior_var: float = 1.0) -> ModelSpec:
    """Two-regime scalar model small enough for brute-force enumeration."""
    return ModelSpec(
        num_states=2,
        matrices=_toy_matrices,
        init_belief=(np.zeros(1), np.array([[prior_var]])),
        param_bounds={"sigma2_y": (1e-300, math.inf), "a": (-math.inf, math.inf)},
        conjugate_update=_toy_conjugate,
        conjugate_needs_z=True,
        name="toy",
    )


def toy_theta(a: float = 0.8, s0: float = 0.3, s1: float = 1.5, sigma2_y: float = 0.5,
              trans_matrix=((0.8, 0.2), (0.3, 0.7))) -> Theta:
    return Theta({"a": a, "s0": s0, "s1": s1, "sigma2_y": sigma2_y}, trans_matrix=np.asarray(trans_matrix))


def toy_priors(shape: float = 3.0, scale: float = 1.0) -> PriorSpec:
    return PriorSpec({"sigma2_y": InverseGamma(shape, scale)})


BUILTIN = {
    "example1": (example1, example1_theta, example1_priors),
    "example2": (example2, example2_theta, example2_priors),
    "example3": (example3, example3_theta, example3_priors),
    "toy": (toy, toy_theta, toy_priors),
}
