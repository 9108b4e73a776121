"""Mixed-integer encodings and solvers."""

from .encode import (
    Query,
    build_query,
    encode_bound_relation,
    encode_expr,
    encode_network,
    encode_overapprox,
    encode_pwl,
    network_output_range,
)
from .model import LinExpr, MipError, MipProblem, SolveResult
from .solvers import HighsSolver, ReferenceSolver, Solver, check_feasible, get_solver, optimize

__all__ = [
    "HighsSolver",
    "LinExpr",
    "MipError",
    "MipProblem",
    "Query",
    "ReferenceSolver",
    "SolveResult",
    "Solver",
    "build_query",
    "check_feasible",
    "encode_bound_relation",
    "encode_expr",
    "encode_network",
    "encode_overapprox",
    "encode_pwl",
    "get_solver",
    "network_output_range",
    "optimize",
]
