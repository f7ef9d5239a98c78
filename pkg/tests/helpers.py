"""Small random models and statistical helpers shared by the tests."""

import math

import numpy as np

from dpmcmc.model import ModelSpec, Theta, simulate
from dpmcmc.models import toy, toy_theta


def random_model(rng, K=2, dz=None, dy=1, polya=False, zero_D=False):
    """Random switching model with well-conditioned matrices.

    Returns (model, theta).  ``zero_D`` drops the observation noise so the
    observation noise comes through C B only.
    """
    dz = int(rng.integers(1, 4)) if dz is None else dz
    mats = []
    for _ in range(K):
        A = rng.uniform(-0.9, 0.9, (dz, dz)) / dz
        B = np.diag(rng.uniform(0.3, 1.2, dz))
        C = rng.normal(size=(dy, dz))
        D = np.zeros((dy, dy)) if zero_D else np.diag(rng.uniform(0.3, 1.0, dy))
        F = rng.normal(size=(dz, 1)) * 0.3
        G = rng.normal(size=(dy, 1)) * 0.3
        mats.append((A, B, C, D, F, G))
    T_max = 16
    u = rng.normal(size=(T_max, 1))
    model = ModelSpec(
        num_states=K,
        matrices=lambda th, x: mats[x],
        init_belief=(rng.normal(size=dz) * 0.5, np.eye(dz) * rng.uniform(0.5, 2.0)),
        inputs=u,
        name="random",
    )
    if polya:
        theta = Theta({}, dirichlet_alpha=rng.uniform(0.5, 2.0, (K, K)), marginalized=True)
    else:
        theta = Theta({}, trans_matrix=rng.dirichlet(np.ones(K) * 2.0, size=K))
    return model, theta


def random_instance(rng, T, **kwargs):
    model, theta = random_model(rng, **kwargs)
    y = simulate(model, theta, T, rng).observations
    return model, theta, y


def tiny_toy(T=4, seed=3):
    """The scalar two-regime model with simulated data."""
    model, theta = toy(), toy_theta()
    y = simulate(model, theta, T, seed).observations
    return model, theta, y


def path_index(paths, K):
    """Lexicographic index of each row of ``paths``."""
    paths = np.atleast_2d(paths)
    idx = np.zeros(paths.shape[0], dtype=np.int64)
    for j in range(paths.shape[1]):
        idx = idx * K + paths[:, j]
    return idx


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def empirical(idx, size):
    return np.bincount(np.asarray(idx), minlength=size) / len(idx)


def binomial_z(count, n, p):
    """z-score of a binomial count; 0 when p is 0 or 1 and the count matches."""
    sd = math.sqrt(n * p * (1 - p))
    if sd == 0:
        return 0.0 if count == n * p else math.inf
    return (count - n * p) / sd
