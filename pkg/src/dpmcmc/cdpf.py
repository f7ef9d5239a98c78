"""Conditional discrete particle filter.

Runs the filter so that a given reference path survives every resampling
step.  When the reference prefix is not maintained outright, the stratified
grid is anchored at a uniform point inside the reference item's interval of
the cumulative weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _backend
from .dpf import DegenerateFilterError, DpfOutput, _prepare_y, _run
from .model import ModelSpec, ModelTables, Theta

__all__ = [
    "ConditioningError",
    "ConditionedRun",
    "conditional_stratified_resample",
    "conditional_dpf_run",
]


class ConditioningError(DegenerateFilterError):
    """The reference path has zero weight under the current parameters."""


@dataclass(frozen=True, eq=False)
class ConditionedRun:
    output: DpfOutput
    conditioned_path: np.ndarray

    @property
    def log_evidence(self) -> float:
        return self.output.log_evidence


def conditional_stratified_resample(ordered_weights, kappa: int, num_survivors: int, rng) -> np.ndarray:
    """Stratified selection of ``num_survivors`` items always including ``kappa``.

    U* is drawn on (Q(kappa-1), Q(kappa)] and the grid is shifted to pass
    through it: U_1 = U* - floor(n U*)/n.  The interval is half-open on the
    left to match the survival test, so ``kappa`` is selected with
    probability one.
    """
    w = np.asarray(ordered_weights, dtype=float)
    if not 0 <= kappa < w.size:
        raise ValueError(f"kappa={kappa} outside 0..{w.size - 1}")
    if not w[kappa] > 0:
        raise ConditioningError(f"conditioned item {kappa} has zero weight")
    if num_survivors < 1 or num_survivors > w.size:
        raise ValueError(f"cannot select {num_survivors} survivors from {w.size} items")
    u = 1.0 - rng.random()
    return np.unique(_backend.core.conditional_stratified_indices(w, int(kappa), int(num_survivors), u))


def conditional_dpf_run(
    model: ModelSpec,
    theta: Theta,
    y,
    N: int,
    reference,
    rng,
    tables: Optional[ModelTables] = None,
) -> ConditionedRun:
    """Filter conditioned on ``reference`` surviving; stores moments for backward sampling."""
    y = _prepare_y(y)
    ref = np.ascontiguousarray(reference, dtype=np.int64)
    T = y.shape[0]
    if ref.shape != (T,):
        raise ValueError(f"reference path has shape {ref.shape}, expected ({T},)")
    K = model.num_states
    if ref.min() < 0 or ref.max() >= K:
        raise ValueError("reference path has states out of range")
    tab = tables if tables is not None else model.tables(theta, T)
    try:
        out = _run(tab, y, N, rng, True, ref)
    except DegenerateFilterError as exc:
        if "reference" in str(exc):
            raise ConditioningError(str(exc)) from exc
        raise
    return ConditionedRun(output=out, conditioned_path=ref.copy())
