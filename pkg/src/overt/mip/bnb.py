"""Branch-and-bound over BoxedLP relaxations.

Optimization is best-bound first; feasibility is depth first and stops at the
first integral leaf. Children inherit the parent's basis, which stays dual
feasible after a bound change, so each node usually needs only a few pivots.
"""

from __future__ import annotations

import heapq
import time

import numpy as np

from .lp import BoxedLP
from .model import MipProblem, SolveResult

INT_TOL = 1e-6


class BranchAndBound:
    def __init__(self, node_limit: int = 10**6, time_limit: float | None = None,
                 gap_abs: float = 1e-7, gap_rel: float = 1e-7):
        self.node_limit = node_limit
        self.time_limit = time_limit
        self.gap_abs = gap_abs
        self.gap_rel = gap_rel

    # setup shared by both modes
    def _prepare(self, p: MipProblem, with_objective: bool):
        names, c, A, senses, b, lb, ub, is_bin = p.to_arrays()
        sign = 1.0
        if with_objective and p.sense == "max":
            sign = -1.0
        if not with_objective:
            c = np.zeros_like(c)
        lp = BoxedLP(A, senses, b, sign * c, lb, ub)
        bins = np.flatnonzero(is_bin)
        const = p.objective.const if (with_objective and p.objective is not None) else 0.0
        return names, lp, bins, sign, const, lb, ub

    def _fractional(self, x, bins, tol=INT_TOL, lb=None, ub=None):
        if bins.size == 0:
            return -1
        frac = np.abs(x[bins] - np.round(x[bins]))
        if lb is not None:
            frac = np.where(lb[bins] == ub[bins], 0.0, frac)
        k = int(np.argmax(frac))  # most fractional; argmax keeps the lowest index on ties
        return int(bins[k]) if frac[k] > tol else -1

    def _polish(self, lp: BoxedLP, x, lb, ub, bins, basis):
        """Fix binaries to their rounded values and re-solve for an exact leaf point."""
        lb2, ub2 = lb.copy(), ub.copy()
        r = np.round(x[bins])
        lb2[bins] = r
        ub2[bins] = r
        return lp.solve(lb2, ub2, basis)

    def _out_of_time(self, t0):
        return self.time_limit is not None and time.perf_counter() - t0 > self.time_limit

    def optimize(self, p: MipProblem) -> SolveResult:
        if p.objective is None:
            raise ValueError("optimize needs an objective")
        names, lp, bins, sign, const, lb, ub = self._prepare(p, True)
        t0 = time.perf_counter()
        best_val = np.inf  # internal minimization
        best_x = None
        closed_bound = np.inf  # min certified bound over closed leaves
        heap = []
        seq = 0
        root = lp.solve(lb, ub)
        nodes = 1
        if root.status == "error":
            return SolveResult("error", nodes=nodes, message="root LP failed")
        if root.status == "infeasible":
            return SolveResult("infeasible", nodes=nodes)
        heapq.heappush(heap, (root.bound, seq, lb, ub, root))
        status = "optimal"
        while heap:
            bound, _, nlb, nub, res = heapq.heappop(heap)
            if bound >= best_val - self._gap(best_val):
                closed_bound = min(closed_bound, bound)
                continue
            j = self._fractional(res.x, bins)
            if j < 0:
                pol = self._polish(lp, res.x, nlb, nub, bins, res.basis)
                nodes += 1
                if pol.status == "optimal" and pol.obj < best_val:
                    best_val, best_x = pol.obj, pol.x
                # rounding within tolerance failed: the subtree is not exhausted yet
                j = -1 if pol.status == "optimal" else self._fractional(res.x, bins, 0.0, nlb, nub)
                if j < 0:
                    # the node bound covers its whole subtree, not just the rounded pattern
                    closed_bound = min(closed_bound, bound)
                    if pol.status == "error":
                        status = "bound-only"
                    continue
            if nodes >= self.node_limit or self._out_of_time(t0):
                heapq.heappush(heap, (bound, seq, nlb, nub, res))
                status = "bound-only"
                break
            for val in (0.0, 1.0):
                clb, cub = nlb.copy(), nub.copy()
                clb[j] = cub[j] = val
                child = lp.solve(clb, cub, res.basis)
                nodes += 1
                if child.status == "infeasible":
                    continue
                if child.status == "error":
                    # keep the parent's bound for this subtree; it cannot be closed
                    closed_bound = min(closed_bound, bound)
                    status = "bound-only"
                    continue
                cb = max(child.bound, bound)
                seq += 1
                heapq.heappush(heap, (cb, seq, clb, cub, child))
        open_bound = min((h[0] for h in heap), default=np.inf)
        cert = min(closed_bound, open_bound)
        if best_x is None and status == "optimal":
            return SolveResult("infeasible", nodes=nodes)
        primal = None if best_x is None else sign * best_val + const
        bound = sign * cert + const if np.isfinite(cert) else (None if best_x is None else primal)
        witness = None if best_x is None else dict(zip(names, best_x.tolist()))
        if best_x is None:
            status = "bound-only"
        return SolveResult(status, primal, bound, witness, nodes)

    def _gap(self, best):
        if not np.isfinite(best):
            return 0.0
        return self.gap_abs + self.gap_rel * abs(best)

    def check_feasible(self, p: MipProblem, tol: float = 1e-7) -> SolveResult:
        names, lp, bins, _, _, lb, ub = self._prepare(p, False)
        t0 = time.perf_counter()
        root = lp.solve(lb, ub)
        nodes = 1
        if root.status == "infeasible":
            return SolveResult("infeasible", nodes=nodes)
        if root.status == "error":
            return SolveResult("error", nodes=nodes, message="root LP failed")
        stack = [(lb, ub, root)]
        while stack:
            nlb, nub, res = stack.pop()
            j = self._fractional(res.x, bins)
            if j < 0:
                pol = self._polish(lp, res.x, nlb, nub, bins, res.basis)
                nodes += 1
                if pol.status == "optimal":
                    witness = dict(zip(names, pol.x.tolist()))
                    for k in bins:
                        witness[names[k]] = float(round(witness[names[k]]))
                    bad = p.violations(witness, tol)
                    if not bad:
                        return SolveResult("feasible", 0.0, 0.0, witness, nodes)
                    return SolveResult("error", nodes=nodes, message="witness failed re-check: " + bad[0])
                if pol.status == "error":
                    return SolveResult("error", nodes=nodes, message="LP failure at a leaf")
                j = self._fractional(res.x, bins, 0.0, nlb, nub)
                if j < 0:
                    continue
            if nodes >= self.node_limit or self._out_of_time(t0):
                return SolveResult("error", nodes=nodes, message="resource limit")
            near = 1.0 if res.x[j] >= 0.5 else 0.0
            children = []
            for val in (1.0 - near, near):  # nearer child pushed last, explored first
                clb, cub = nlb.copy(), nub.copy()
                clb[j] = cub[j] = val
                child = lp.solve(clb, cub, res.basis)
                nodes += 1
                if child.status == "error":
                    return SolveResult("error", nodes=nodes, message="LP failure")
                if child.status == "optimal":
                    children.append((clb, cub, child))
            stack.extend(children)
        return SolveResult("infeasible", nodes=nodes)
