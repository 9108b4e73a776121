"""Solver backends behind one interface.

``reference`` is the bundled branch-and-bound; ``highs`` adapts
``scipy.optimize.milp``. ``OVERT_SOLVER`` picks the default.
"""

from __future__ import annotations

import os

import numpy as np

from .bnb import BranchAndBound
from .lp import BoxedLP
from .model import MipProblem, SolveResult


class Solver:
    name = "abstract"

    def optimize(self, p: MipProblem) -> SolveResult:
        raise NotImplementedError

    def check_feasible(self, p: MipProblem) -> SolveResult:
        raise NotImplementedError


class ReferenceSolver(Solver):
    name = "reference"

    def __init__(self, node_limit: int = 10**6, time_limit: float | None = None,
                 gap_abs: float = 1e-7, gap_rel: float = 1e-7):
        self._bnb = BranchAndBound(node_limit, time_limit, gap_abs, gap_rel)

    def optimize(self, p):
        return self._bnb.optimize(p)

    def check_feasible(self, p):
        return self._bnb.check_feasible(p)


def _polish(p: MipProblem, x: np.ndarray, sense_sign: float):
    """Re-solve the LP with binaries fixed, so witnesses satisfy rows to ~1e-9."""
    names, c, A, senses, b, lb, ub, is_bin = p.to_arrays()
    lb, ub = lb.copy(), ub.copy()
    r = np.round(x[is_bin])
    lb[is_bin] = ub[is_bin] = r
    res = BoxedLP(A, senses, b, sense_sign * c, lb, ub).solve()
    if res.status != "optimal":
        return None
    w = dict(zip(names, res.x.tolist()))
    for k in np.flatnonzero(is_bin):
        w[names[k]] = float(round(w[names[k]]))
    return w


class HighsSolver(Solver):
    name = "highs"

    def __init__(self, node_limit: int = 10**6, time_limit: float | None = None, gap_rel: float = 1e-9):
        self.node_limit = node_limit
        self.time_limit = time_limit
        self.gap_rel = gap_rel

    def _run(self, p: MipProblem, c):
        from scipy.optimize import Bounds, LinearConstraint, milp

        names, _, A, senses, b, lb, ub, is_bin = p.to_arrays()
        lo = np.where([s in (">=", "==") for s in senses], b, -np.inf)
        hi = np.where([s in ("<=", "==") for s in senses], b, np.inf)
        cons = [LinearConstraint(A, lo, hi)] if len(senses) else []
        opts = {"node_limit": self.node_limit, "mip_rel_gap": self.gap_rel}
        if self.time_limit is not None:
            opts["time_limit"] = self.time_limit
        return milp(c, constraints=cons, integrality=is_bin.astype(int), bounds=Bounds(lb, ub), options=opts)

    def optimize(self, p):
        if p.objective is None:
            raise ValueError("optimize needs an objective")
        names, c, *_ = p.to_arrays()
        sign = -1.0 if p.sense == "max" else 1.0
        res = self._run(p, sign * c)
        const = p.objective.const
        if res.status == 2:
            return SolveResult("infeasible")
        if res.x is None:
            return SolveResult("error", message=str(res.message))
        dual = getattr(res, "mip_dual_bound", None)
        if dual is None or not np.isfinite(dual):
            dual = res.fun
        # HiGHS reports its bound in the minimization form we handed it
        dual = min(float(dual), float(res.fun))
        w = _polish(p, res.x, sign) or dict(zip(names, res.x.tolist()))
        primal = p.objective.value(w)
        status = "optimal" if res.status == 0 else "bound-only"
        return SolveResult(status, primal, sign * dual + const, w, 0, str(res.message))

    def check_feasible(self, p):
        names, c, *_ = p.to_arrays()
        res = self._run(p, np.zeros_like(c))
        if res.status == 2:
            return SolveResult("infeasible")
        if res.status != 0 or res.x is None:
            return SolveResult("error", message=str(res.message))
        w = _polish(p, res.x, 0.0)
        if w is None or p.violations(w):
            return SolveResult("error", message="witness failed re-check")
        return SolveResult("feasible", 0.0, 0.0, w, 0)


SOLVERS = {"reference": ReferenceSolver, "highs": HighsSolver}


def get_solver(name: str | None = None, **kwargs) -> Solver:
    """Instantiate a backend; ``name`` falls back to ``$OVERT_SOLVER`` then ``reference``."""
    if isinstance(name, Solver):
        return name
    name = name or os.environ.get("OVERT_SOLVER") or "reference"
    try:
        cls = SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}") from None
    return cls(**kwargs)


def optimize(p: MipProblem, solver=None) -> SolveResult:
    return get_solver(solver).optimize(p)


def check_feasible(p: MipProblem, solver=None) -> SolveResult:
    return get_solver(solver).check_feasible(p)
