"""Compiled kernels against the numpy fallback.

Times the filter forward pass, the backward sampling pass and FFBS on the
built-in examples with identical inputs for both backends.

Usage::

    python benchmarks/bench_backends.py [--repeats 5] [--T 500]
"""

import argparse
import time

import numpy as np

from dpmcmc import _backend, _core_py
from dpmcmc.model import simulate
from dpmcmc.models import example1, example1_theta, example2, example2_theta


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(T):
    rng = np.random.default_rng(0)
    for name, model, theta in (
        ("example1 markov", example1(), example1_theta()),
        ("example1 polya", example1(), example1_theta(marginalized=True)),
        ("example2 markov", example2(), example2_theta()),
    ):
        y = simulate(model, theta, T, rng).observations
        yield name, model.tables(theta, T), y


def _forward(kern, tab, y, N, u, store):
    yk = y if kern is _core_py else y[:, 0].copy()
    return kern.forward(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, yk, tab.m0, tab.P0, tab.log_nu,
                        tab.trans_kind, tab.trans_param, N, u, np.zeros(0, dtype=np.int64), store)


def _backward(kern, tab, y, out, u):
    counts = out["counts"] if out["counts"] is not None else np.zeros((1, 1, 1, 1), dtype=np.int32)
    return kern.backward(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, y[:, 0].copy(), tab.trans_kind,
                         tab.trans_param, out["sizes"], out["states"], out["parents"], out["logw"],
                         out["means"], out["covs"], counts, u)


def _ffbs(kern, tab, y, path, normals):
    yk = y if kern is _core_py else y[:, 0].copy()
    return kern.ffbs(tab.A, tab.Q, tab.C, tab.R, tab.fu, tab.gu, yk, tab.m0, tab.P0, path, normals)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--T", type=int, default=500)
    ap.add_argument("--N", type=int, nargs="+", default=[10, 50])
    args = ap.parse_args(argv)
    if _backend.BACKEND != "cython":
        print("compiled core not available; nothing to compare")
        return 1
    kernels = {"cython": _backend.core, "python": _core_py}
    print(f"{'case':<18}{'pass':<12}{'N':>4}{'cython ms':>12}{'python ms':>12}{'speedup':>9}")
    for name, tab, y in _cases(args.T):
        rng = np.random.default_rng(1)
        for N in args.N:
            u = 1.0 - rng.random(args.T)
            out = _forward(_core_py, tab, y, N, u, True)
            ub = 1.0 - rng.random(args.T)
            path = rng.integers(0, tab.num_states, args.T)
            normals = rng.standard_normal((args.T + 1, tab.z_dim))
            jobs = {
                "forward": lambda k: _forward(k, tab, y, N, u, False),
                "backward": lambda k: _backward(k, tab, y, out, ub),
            }
            if N == args.N[0]:
                jobs["ffbs"] = lambda k: _ffbs(k, tab, y, path, normals)
            for job, fn in jobs.items():
                t = {kn: _best(lambda: fn(k), args.repeats) for kn, k in kernels.items()}
                print(f"{name:<18}{job:<12}{N:>4}{t['cython'] * 1e3:>12.2f}{t['python'] * 1e3:>12.2f}"
                      f"{t['python'] / t['cython']:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
