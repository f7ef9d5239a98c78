"""Discrete particle filtering and particle MCMC for switching linear-Gaussian models."""

from ._backend import BACKEND
from .backward import BackwardPotential, backward_loglik, backward_potential_step, backward_sample
from .cdpf import ConditionedRun, conditional_dpf_run
from .dpf import DegenerateFilterError, DpfOutput, dpf_run, sample_path, solve_threshold
from .kalman import GaussianBelief, conditional_loglik, ffbs_continuous, kalman_step
from .model import ModelSpec, Theta, Trajectory, simulate, transition_prob
from .oracle import ExactPosterior, enumerate_posterior, posterior_marginals

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BackwardPotential",
    "ConditionedRun",
    "DegenerateFilterError",
    "DpfOutput",
    "ExactPosterior",
    "GaussianBelief",
    "ModelSpec",
    "Theta",
    "Trajectory",
    "backward_loglik",
    "backward_potential_step",
    "backward_sample",
    "conditional_dpf_run",
    "conditional_loglik",
    "dpf_run",
    "enumerate_posterior",
    "ffbs_continuous",
    "kalman_step",
    "posterior_marginals",
    "sample_path",
    "simulate",
    "solve_threshold",
    "transition_prob",
]
