"""Solver and learner for finite regularized mean-field games."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    EntropyRegularizer,
    GameModel,
    entropy_regularizer,
    lift_reward,
    lift_transition,
    benchmark_model,
    benchmark_regularizer,
    q_vector,
)
from .exact import (  # noqa: E402
    QFactors,
    bellman_T,
    greedy_policy,
    kappa_bound,
    mean_field_update,
    mfe_operator,
    solve_mfe,
    solve_q_star,
    theory_constants,
)

__all__ = [
    "EntropyRegularizer", "GameModel", "entropy_regularizer", "lift_reward", "lift_transition",
    "benchmark_model", "benchmark_regularizer", "q_vector", "QFactors", "bellman_T", "greedy_policy",
    "kappa_bound", "mean_field_update", "mfe_operator", "solve_mfe", "solve_q_star", "theory_constants",
]
