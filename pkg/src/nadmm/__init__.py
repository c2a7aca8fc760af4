"""Nonconvex ADMM with runtime convergence diagnostics."""

from .admm import AdmmConfig, SolveReport, Trace, run, step
from .analysis import (check_kkt, check_licq, check_sosc, convergence_rate, critical_rho,
                       lyapunov, reference_solution, rho_norm, verify_decrease_bound)
from .expr import Point, evaluate, grad, hess, parse_expr
from .model import (BlockProblem, BlockSpec, InequalitySpec, Problem, SharedBlockSpec,
                    SharedBudgetProblem, add_slacks, canonicalize_block, canonicalize_shared,
                    validate)
from .nlpsolve import NlpInstance, solve_eq_nlp

__version__ = "0.1.0"
