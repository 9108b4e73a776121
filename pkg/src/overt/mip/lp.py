"""Dense bounded-variable dual simplex with certified bounds.

Every row gets a slack column whose bounds are implied by the variable box,
so the problem is ``min c.z  s.t.  M z = b,  lo <= z <= hi`` with all bounds
finite. For boxed columns any basis is made dual feasible by parking each
nonbasic column at the bound its reduced cost prefers, so no phase 1 is needed.

Certified bound: for any multipliers y,
    c.z = y.b + (c - M'y).z >= y.b + sum_j min(r_j lo_j, r_j hi_j)
holds on the whole box, so it is valid whatever y the simplex ends with.
Infeasibility is certified the same way: a row of B^-1 whose combination
cannot reach its right-hand side anywhere on the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRIMAL_TOL = 1e-9
PIVOT_TOL = 1e-9
REL_PIVOT_TOL = 1e-7  # relative to the largest entry of the pivot row
REFACTOR_EVERY = 40
MAX_RESTARTS = 3  # fallbacks to the slack basis before giving up
DEGENERATE_STREAK = 50  # zero-step pivots in a row before switching to Bland's rule


def _pow2_scale(A, passes: int = 4):
    """Geometric-mean row/column equilibration with power-of-two factors.

    Powers of two rescale without rounding, so bounds and certificates
    computed on the scaled problem hold exactly for the original.
    """
    m, n = A.shape
    r, c = np.ones(m), np.ones(n)
    absA = np.abs(A)
    nz = absA > 0
    for _ in range(passes):
        S = absA * r[:, None] * c[None, :]
        big = np.where(nz, S, 0.0).max(axis=1, initial=0.0)
        small = np.where(nz, S, np.inf).min(axis=1, initial=np.inf)
        ok = big > 0
        r[ok] /= np.exp2(np.round(0.5 * np.log2(big[ok] * small[ok])))
        S = absA * r[:, None] * c[None, :]
        big = np.where(nz, S, 0.0).max(axis=0, initial=0.0)
        small = np.where(nz, S, np.inf).min(axis=0, initial=np.inf)
        ok = big > 0
        c[ok] /= np.exp2(np.round(0.5 * np.log2(big[ok] * small[ok])))
    return r, c


def _factor(B):
    """Inverse of ``B``, or None when it is singular to working precision."""
    try:
        inv = np.linalg.inv(B)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(inv)) or np.abs(B @ inv - np.eye(len(B))).max() > 1e-8:
        return None
    return inv


@dataclass
class Basis:
    basic: np.ndarray  # column index per row
    at_ub: np.ndarray  # bool per column; meaningful for nonbasic columns


@dataclass
class LPResult:
    status: str  # optimal | infeasible | error
    x: np.ndarray | None = None  # structural part
    obj: float = np.inf
    bound: float = -np.inf  # certified lower bound on obj; +inf when certified infeasible
    basis: Basis | None = None
    iters: int = 0


class BoxedLP:
    """LP over a fixed constraint matrix; bounds on structural columns vary per solve."""

    def __init__(self, A, senses, b, c, lb, ub):
        A = np.asarray(A, dtype=float)
        m, n = A.shape
        self.m, self.n = m, n
        # internally x = col_scale * x_scaled and each row is multiplied by row_scale
        self.row_scale, self.col_scale = _pow2_scale(A) if A.size else (np.ones(m), np.ones(n))
        A = A * self.row_scale[:, None] * self.col_scale[None, :]
        self.M = np.hstack([A, np.eye(m)])
        self.b = np.asarray(b, dtype=float) * self.row_scale
        self.c = np.concatenate([np.asarray(c, dtype=float) * self.col_scale, np.zeros(m)])
        self.root_lb = np.asarray(lb, dtype=float) / self.col_scale
        self.root_ub = np.asarray(ub, dtype=float) / self.col_scale
        # slack s = b - A x, ranged over the root box
        pos, neg = np.maximum(A, 0.0), np.minimum(A, 0.0)
        act_lo = pos @ self.root_lb + neg @ self.root_ub
        act_hi = pos @ self.root_ub + neg @ self.root_lb
        pad = 1e-9 * (np.abs(A) @ np.maximum(np.abs(self.root_lb), np.abs(self.root_ub)) + np.abs(self.b) + 1.0)
        s_lo = self.b - act_hi - pad
        s_hi = self.b - act_lo + pad
        senses = list(senses)
        for i, s in enumerate(senses):
            if s == "<=":
                s_lo[i] = max(s_lo[i], 0.0)
            elif s == ">=":
                s_hi[i] = min(s_hi[i], 0.0)
            else:
                s_lo[i] = s_hi[i] = 0.0
        self.slack_lo, self.slack_hi = s_lo, s_hi

    def _full_bounds(self, lb, ub):
        return np.concatenate([lb, self.slack_lo]), np.concatenate([ub, self.slack_hi])

    def solve(self, lb=None, ub=None, basis: Basis | None = None, max_iter: int | None = None) -> LPResult:
        lb = self.root_lb if lb is None else np.asarray(lb, dtype=float) / self.col_scale
        ub = self.root_ub if ub is None else np.asarray(ub, dtype=float) / self.col_scale
        lo, hi = self._full_bounds(lb, ub)
        m, N = self.m, self.n + self.m
        if np.any(lo > hi + PRIMAL_TOL):
            return LPResult("infeasible", bound=np.inf)
        hi = np.maximum(hi, lo)
        if m == 0:
            x = np.where(self.c[: self.n] >= 0, lb, ub)
            val = float(self.c[: self.n] @ x)
            return LPResult("optimal", x * self.col_scale, val, val, Basis(np.zeros(0, dtype=int), np.zeros(N, bool)))

        if basis is None:
            basic = np.arange(self.n, N)
            at_ub = self.c < 0
        else:
            basic = basis.basic.copy()
            at_ub = basis.at_ub.copy()
        fixed = hi - lo <= 0.0
        max_iter = max_iter or 50 * (N + m) + 1000
        slack_basis = np.arange(self.n, N)
        Binv = _factor(self.M[:, basic])
        if Binv is None:
            basic, Binv = slack_basis.copy(), np.eye(m)

        M, b, c = self.M, self.b, self.c
        is_basic = np.zeros(N, dtype=bool)
        since_refactor = 0
        restarts = 0
        streak, bland = 0, False
        for it in range(max_iter):
            is_basic[:] = False
            is_basic[basic] = True
            y = c[basic] @ Binv
            d = c - y @ M
            nb = ~is_basic
            # park nonbasics on the bound their reduced cost prefers
            at_ub = np.where(nb & (d < -1e-12), True, np.where(nb & (d > 1e-12), False, at_ub))
            xfull = np.where(at_ub, hi, lo)
            xfull[basic] = 0.0
            xB = Binv @ (b - M @ xfull)
            lo_B, hi_B = lo[basic], hi[basic]
            below = lo_B - xB
            above = xB - hi_B
            scale = 1.0 + np.abs(xB)
            infeas = np.maximum(below, above) / scale
            r = int(np.argmax(infeas))
            if bland and infeas[r] > PRIMAL_TOL:
                rows = np.flatnonzero(infeas > PRIMAL_TOL)
                r = int(rows[np.argmin(basic[rows])])
            if infeas[r] <= PRIMAL_TOL:
                xfull[basic] = np.clip(xB, lo_B, hi_B)
                return self._finish(lo, hi, basic, at_ub, xfull, it)
            alpha = Binv[r] @ M
            increase = below[r] > above[r]
            tol = max(PIVOT_TOL, REL_PIVOT_TOL * np.abs(alpha[nb & ~fixed]).max(initial=0.0))
            if increase:
                elig = nb & ~fixed & ((~at_ub & (alpha < -tol)) | (at_ub & (alpha > tol)))
            else:
                elig = nb & ~fixed & ((~at_ub & (alpha > tol)) | (at_ub & (alpha < -tol)))
            cand = np.flatnonzero(elig)
            if cand.size == 0:
                if since_refactor > 0:
                    # eta drift can fake an infeasible row; retry from a fresh inverse
                    Binv = _factor(M[:, basic])
                    if Binv is None:
                        restarts += 1
                        if restarts > MAX_RESTARTS:
                            return LPResult("error", iters=it)
                        basic, Binv = slack_basis.copy(), np.eye(m)
                    since_refactor = 0
                    continue
                return self._infeasible(lo, hi, basic, it)
            ratios = np.abs(d[cand]) / np.abs(alpha[cand])
            # Harris-style: among near-minimal ratios take the largest pivot
            tmin = ratios.min()
            near = cand[ratios <= tmin + 1e-12 * (1.0 + tmin)]
            q = int(near[0]) if bland else int(near[np.argmax(np.abs(alpha[near]))])
            streak = streak + 1 if tmin <= 1e-12 else 0
            bland = bland or streak > DEGENERATE_STREAK
            col = Binv @ M[:, q]
            piv = col[r]
            if abs(piv) < PIVOT_TOL:
                Binv = _factor(M[:, basic])
                if Binv is None:
                    restarts += 1
                    if restarts > MAX_RESTARTS:
                        return LPResult("error", iters=it)
                    basic, Binv = slack_basis.copy(), np.eye(m)
                since_refactor = 0
                continue
            leaving = basic[r]
            at_ub[leaving] = not increase
            basic[r] = q
            since_refactor += 1
            if since_refactor >= REFACTOR_EVERY:
                Binv = _factor(M[:, basic])
                if Binv is None:
                    # a near-singular basis slipped through; restart from the slacks
                    restarts += 1
                    if restarts > MAX_RESTARTS:
                        return LPResult("error", iters=it)
                    basic, Binv = slack_basis.copy(), np.eye(m)
                since_refactor = 0
            else:
                row = Binv[r] / piv
                Binv -= np.outer(col, row)
                Binv[r] = row
        return LPResult("error", iters=max_iter)

    def _finish(self, lo, hi, basic, at_ub, xfull, it) -> LPResult:
        M, b, c = self.M, self.b, self.c
        try:
            Binv = np.linalg.inv(M[:, basic])
        except np.linalg.LinAlgError:
            return LPResult("error", iters=it)
        y = c[basic] @ Binv
        red = c - y @ M
        bound = float(y @ b + np.minimum(red * lo, red * hi).sum())
        bound -= 1e-9 * (1.0 + abs(bound))
        x = xfull[: self.n].copy()
        obj = float(c[: self.n] @ x)
        x *= self.col_scale
        return LPResult("optimal", x, obj, min(bound, obj), Basis(basic.copy(), at_ub.copy()), it)

    def _infeasible(self, lo, hi, basic, it) -> LPResult:
        M, b = self.M, self.b
        try:
            Binv = np.linalg.inv(M[:, basic])
        except np.linalg.LinAlgError:
            return LPResult("error", iters=it)
        # any row of B^-1 gives a valid combination; take the most violated one
        g_all = Binv @ M
        rhs_all = Binv @ b
        pos, neg = np.maximum(g_all, 0.0), np.minimum(g_all, 0.0)
        act_lo = pos @ lo + neg @ hi
        act_hi = pos @ hi + neg @ lo
        mag = np.abs(g_all) @ np.maximum(np.abs(lo), np.abs(hi)) + np.abs(rhs_all)
        margin = np.maximum(act_lo - rhs_all, rhs_all - act_hi) - 1e-9 * (1.0 + mag)
        if np.max(margin) > 0.0:
            return LPResult("infeasible", bound=np.inf, iters=it)
        return LPResult("error", iters=it)
