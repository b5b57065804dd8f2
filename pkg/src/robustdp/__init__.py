"""Finite robust Markov decision processes: Bellman solvers, policy evaluation
under controllers and adversaries of varying information, dynamic
programming checks and an explore-then-exploit learner."""

from .bellman import check_interchange, solve_infsup, solve_q, solve_supinf
from .dpp import classify, render_tables, verify_numeric
from .model import RobustMdp, load_model, parse_model, serialize, validate
from .policy import evaluate_exact, evaluate_mc, robust_evaluate, simulate

__all__ = [
    "RobustMdp", "check_interchange", "classify", "evaluate_exact", "evaluate_mc", "load_model", "parse_model",
    "render_tables", "robust_evaluate", "serialize", "simulate", "solve_infsup", "solve_q", "solve_supinf",
    "validate", "verify_numeric",
]
