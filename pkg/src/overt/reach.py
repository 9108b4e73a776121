"""Reachability drivers over relational overapproximations.

Boxes come only from certified solver bounds and "holds" only from
infeasibility certificates or those bounds, each cleared by ``SLACK``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bounds1d import ApproxParams
from .expr import Interval, as_interval, linear_form, parse
from .mip import MipProblem, build_query, get_solver
from .mip.model import LinExpr
from .nn import Network, forward, output_range
from .overapprox import OverApproximation, SystemSpec, overapproximate_dynamics

SLACK = 1e-7
WIDTH_FLOOR = 1e-12


class ReachUnknown(RuntimeError):
    """A solve ended without a usable certificate; ``partial`` holds the boxes so far."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = list(partial or [])


# ---------------------------------------------------------------------------
# Sets and properties
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    intervals: tuple

    def __post_init__(self):
        ivs = tuple(as_interval(d) for d in self.intervals)
        if not ivs:
            raise ValueError("a box needs at least one dimension")
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def of(cls, bounds) -> Box:
        return bounds if isinstance(bounds, Box) else cls(tuple(bounds))

    @classmethod
    def hull(cls, points) -> Box:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(tuple(Interval(a, b) for a, b in zip(pts.min(axis=0), pts.max(axis=0))))

    @property
    def dim(self) -> int:
        return len(self.intervals)

    @property
    def lo(self) -> np.ndarray:
        return np.array([d.lo for d in self.intervals])

    @property
    def hi(self) -> np.ndarray:
        return np.array([d.hi for d in self.intervals])

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    def floored(self, floor: float = WIDTH_FLOOR) -> Box:
        out = []
        for d in self.intervals:
            if d.width < floor:
                pad = 0.5 * (floor - d.width)
                d = Interval(d.lo - pad, d.hi + pad)
            out.append(d)
        return Box(tuple(out))

    def contains(self, points, tol: float = 0.0) -> bool:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return bool(np.all(pts >= self.lo - tol) and np.all(pts <= self.hi + tol))

    def subset_of(self, other: Box, slack: float = 1e-9) -> bool:
        return bool(np.all(self.lo >= other.lo - slack) and np.all(self.hi <= other.hi + slack))

    def to_list(self) -> list:
        return [[d.lo, d.hi] for d in self.intervals]

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self):
        return len(self.intervals)


@dataclass(frozen=True)
class LinearAtom:
    """``sum(coeffs[k] * x_k) <sense> rhs`` with ``sense`` in ``>=``/``<=``."""

    coeffs: tuple
    sense: str
    rhs: float

    def __post_init__(self):
        if self.sense not in (">=", "<="):
            raise ValueError(f"atom sense must be >= or <=, not {self.sense!r}")
        c = tuple(float(v) for v in self.coeffs)
        if not any(c):
            raise ValueError("degenerate atom: all coefficients are zero")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "rhs", float(self.rhs))

    @classmethod
    def parse(cls, text: str, states: Sequence[str]) -> LinearAtom:
        for sense in (">=", "<="):
            if sense in text:
                left, right = text.split(sense, 1)
                break
        else:
            raise ValueError(f"atom needs >= or <=: {text!r}")
        lf = linear_form(parse(left) - parse(right))
        if lf is None:
            raise ValueError(f"atom is not linear: {text!r}")
        coeffs, const = lf
        unknown = set(coeffs) - set(states)
        if unknown:
            raise ValueError(f"atom uses unknown states {sorted(unknown)}")
        return cls(tuple(coeffs.get(s, 0.0) for s in states), sense, -const)

    def value(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ np.array(self.coeffs)

    def satisfied(self, x) -> np.ndarray:
        v = self.value(x)
        return v >= self.rhs if self.sense == ">=" else v <= self.rhs

    def range_over(self, box: Box) -> Interval:
        c = np.array(self.coeffs)
        lo = np.where(c >= 0, box.lo, box.hi) @ c
        hi = np.where(c >= 0, box.hi, box.lo) @ c
        return Interval(float(lo), float(hi))

    def row(self) -> dict:
        return {i: v for i, v in enumerate(self.coeffs) if v != 0.0}

    def negation(self, slack: float = SLACK):
        """Closed complement, enlarged by ``slack``."""
        if self.sense == ">=":
            return (self.row(), "<=", self.rhs + slack)
        return (self.row(), ">=", self.rhs - slack)

    def relaxed(self, slack: float = SLACK):
        """The atom itself, enlarged by ``slack``."""
        if self.sense == ">=":
            return (self.row(), ">=", self.rhs - slack)
        return (self.row(), "<=", self.rhs + slack)

    def to_text(self, states: Sequence[str]) -> str:
        terms = " + ".join(f"{v!r}*{s}" for v, s in zip(self.coeffs, states) if v != 0.0)
        return f"{terms} {self.sense} {self.rhs!r}"


@dataclass(frozen=True)
class Property:
    """Bounded temporal property over a conjunction of linear atoms."""

    modality: str
    t1: int
    t2: int
    atoms: tuple

    def __post_init__(self):
        if self.modality not in ("G", "F"):
            raise ValueError(f"modality must be G or F, not {self.modality!r}")
        if self.t1 < 1 or self.t2 < self.t1:
            raise ValueError(f"bad timestep range [{self.t1}, {self.t2}]")
        if not self.atoms:
            raise ValueError("a property needs at least one atom")
        object.__setattr__(self, "atoms", tuple(self.atoms))

    @classmethod
    def parse(cls, modality: str, t1: int, t2: int, atoms: Sequence[str], states: Sequence[str]) -> Property:
        return cls(modality, int(t1), int(t2), tuple(LinearAtom.parse(a, states) for a in atoms))

    def satisfied(self, x) -> np.ndarray:
        ok = np.ones(np.atleast_2d(x).shape[0], dtype=bool)
        for a in self.atoms:
            ok &= np.atleast_1d(a.satisfied(np.atleast_2d(x)))
        return ok

    def in_range(self, t: int) -> bool:
        return self.t1 <= t <= self.t2

    def to_dict(self, states: Sequence[str]) -> dict:
        return {"modality": self.modality, "t1": self.t1, "t2": self.t2,
                "atoms": [a.to_text(states) for a in self.atoms]}


@dataclass(frozen=True)
class ConcretizationSchedule:
    segments: tuple

    def __post_init__(self):
        segs = tuple(int(s) for s in self.segments)
        if not segs or any(s < 1 for s in segs):
            raise ValueError(f"schedule segments must be positive: {self.segments}")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def parse(cls, text: str) -> ConcretizationSchedule:
        return cls(tuple(int(s) for s in str(text).split(",") if s.strip()))

    @classmethod
    def concrete(cls, horizon: int) -> ConcretizationSchedule:
        return cls((1,) * horizon)

    @property
    def horizon(self) -> int:
        return sum(self.segments)

    def check(self, horizon: int) -> None:
        if self.horizon != horizon:
            raise ValueError(f"schedule {list(self.segments)} sums to {self.horizon}, horizon is {horizon}")


@dataclass(frozen=True)
class ResetPolicy:
    """When the hybrid feasibility driver concretizes: never, every k steps, or on growth."""

    kind: str = "every"
    k: float = 5

    def __post_init__(self):
        if self.kind not in ("never", "every", "growth"):
            raise ValueError(f"unknown reset policy {self.kind!r}")
        if self.kind != "never" and self.k <= 0:
            raise ValueError("reset parameter must be positive")

    @classmethod
    def parse(cls, text: str) -> ResetPolicy:
        kind, _, arg = str(text).partition(":")
        if kind == "never":
            return cls("never", 0)
        if kind == "every":
            return cls("every", int(arg or 5))
        if kind == "growth":
            return cls("growth", float(arg or 2.0))
        raise ValueError(f"unknown reset policy {text!r}")

    def due(self, i: int, frontier: Box, anchor: Box) -> bool:
        if self.kind == "never":
            return False
        if self.kind == "every":
            return i % int(self.k) == 0
        return frontier.diameter > self.k * max(anchor.diameter, WIDTH_FLOOR)

    def __str__(self) -> str:
        return "never" if self.kind == "never" else f"{self.kind}:{self.k:g}"


@dataclass
class Verdict:
    status: str  # holds | fails | inconclusive | unknown
    boxes: list = field(default_factory=list)  # (t, Box, kind)
    counterexample: dict | None = None
    message: str = ""
    step: int | None = None


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


@dataclass
class ClosedLoop:
    """A system with its controller and the knobs used to abstract it.

    Without a controller the controls range freely over ``control_box``.
    """

    system: SystemSpec
    controller: Network | None = None
    control_box: list | None = None
    params: ApproxParams = field(default_factory=ApproxParams)
    control_method: str = "interval"
    solver: object = None
    jobs: int = 1
    allow_tanh: bool = False

    def __post_init__(self):
        self.solver = get_solver(self.solver)
        if self.controller is None and self.system.controls and self.control_box is None:
            raise ValueError("a closed loop without a controller needs a control box")
        if self.controller is not None:
            if self.controller.n_in != self.system.n_states or self.controller.n_out != len(self.system.controls):
                raise ValueError(f"controller shape {self.controller.shape} does not fit system {self.system.name}")

    @property
    def states(self) -> list:
        return list(self.system.states)

    def control_range(self, box: Box) -> list:
        if not self.system.controls:
            return []
        if self.controller is None:
            return [as_interval(d) for d in self.control_box]
        rng = output_range(self.controller, list(box), self.control_method, self.solver)
        return [d.widen() for d in rng]

    def overapproximate(self, box: Box) -> OverApproximation:
        return overapproximate_dynamics(self.system, list(box), self.control_range(box), self.params)

    def controls_at(self, x) -> np.ndarray:
        if self.controller is None:
            raise ValueError("no controller to evaluate")
        return forward(self.controller, x)

    def simulate(self, x0, steps: int, controls=None) -> np.ndarray:
        """Exact trajectory ``(steps + 1, n)``; ``controls`` overrides the controller."""
        x = np.asarray(x0, dtype=float)
        out = [x]
        for t in range(steps):
            u = np.asarray(controls[t], dtype=float) if controls is not None else self.controls_at(x)
            x = self.system.step(x, u)
            out.append(x)
        return np.array(out)


# ---------------------------------------------------------------------------
# Set computation
# ---------------------------------------------------------------------------


def symbolic_reach(approximations: Sequence[OverApproximation], input_set, n: int | None = None,
                   controller: Network | None = None, solver=None, jobs: int = 1,
                   allow_tanh: bool = False) -> Box:
    """Box of the state after ``n`` steps from certified min/max solves."""
    approximations = list(approximations)
    n = len(approximations) if n is None else n
    if n != len(approximations):
        raise ValueError(f"need {n} approximations, got {len(approximations)}")
    box = Box.of(input_set)
    if n == 0:
        return box
    solver = get_solver(solver)
    q = build_query(approximations, controller, list(box), allow_tanh=allow_tanh)
    final = q.states[-1]

    def solve(task):
        sense, k = task
        p = MipProblem(q.problem.vars, q.problem.rows)
        p.set_objective(LinExpr.var(final[k]), sense)
        res = solver.optimize(p)
        if res.bound is None or res.status not in ("optimal", "bound-only") or not math.isfinite(res.bound):
            raise ReachUnknown(f"{sense} of state {k} after {n} steps: {res.status} {res.message}".strip())
        return res.bound

    tasks = [(s, k) for k in range(box.dim) for s in ("min", "max")]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            vals = list(ex.map(solve, tasks))
    else:
        vals = [solve(t) for t in tasks]
    out = []
    for k in range(box.dim):
        lo, hi = vals[2 * k], vals[2 * k + 1]
        out.append(Interval(min(lo, hi), max(lo, hi)))
    return Box(tuple(out)).floored()


def one_step_reach(approximation: OverApproximation, box, controller=None, solver=None, jobs: int = 1,
                   allow_tanh: bool = False) -> Box:
    return symbolic_reach([approximation], box, 1, controller, solver, jobs, allow_tanh)


def _sym(loop: ClosedLoop, approximations, box, n=None) -> Box:
    return symbolic_reach(approximations, box, n, loop.controller, loop.solver, loop.jobs, loop.allow_tanh)


def compute_reach_sets(loop: ClosedLoop, initial, schedule) -> list:
    """Hybrid-symbolic boxes ``[(t, Box, kind), ...]`` for ``t = 1..horizon``.

    Within a segment of length n: n-1 one-step boxes from successive
    re-abstraction, then one n-step solve from the segment's entry box.
    """
    if not isinstance(schedule, ConcretizationSchedule):
        schedule = ConcretizationSchedule(tuple(schedule))
    sym_input = Box.of(initial)
    frontier = sym_input
    out = []
    t = 0
    try:
        for n in schedule.segments:
            approximations = []
            for _ in range(n - 1):
                f = loop.overapproximate(frontier)
                approximations.append(f)
                frontier = _sym(loop, [f], frontier)
                t += 1
                out.append((t, frontier, "concrete"))
            f = loop.overapproximate(frontier)
            approximations.append(f)
            frontier = _sym(loop, approximations, sym_input)
            t += 1
            out.append((t, frontier, "symbolic" if n > 1 else "concrete"))
            sym_input = frontier
    except ReachUnknown as exc:
        raise ReachUnknown(str(exc), out) from None
    return out


# ---------------------------------------------------------------------------
# Adjudication
# ---------------------------------------------------------------------------


def _boxes_by_t(boxes) -> dict:
    out = {}
    for item in boxes:
        t, box = item[0], item[1]
        out[int(t)] = Box.of(box)
    return out


def _disjoint_from_goal(box: Box, prop: Property) -> bool:
    # one separating atom settles it; otherwise an exact LP over the box
    for a in prop.atoms:
        r = a.range_over(box)
        if (a.sense == ">=" and r.hi < a.rhs - SLACK) or (a.sense == "<=" and r.lo > a.rhs + SLACK):
            return True
    p = MipProblem()
    names = [p.add_var(f"x{k}", d.lo, d.hi) for k, d in enumerate(box)]
    for a in prop.atoms:
        row, sense, rhs = a.relaxed()
        p.add_constr(sum((v * names[k] for k, v in row.items()), LinExpr()), sense, rhs)
    return get_solver("reference").check_feasible(p).status == "infeasible"


def evaluate_property(boxes, prop: Property) -> Verdict:
    """Verdict from per-timestep boxes alone; G never fails from boxes."""
    by_t = _boxes_by_t(boxes)
    missing = [t for t in range(prop.t1, prop.t2 + 1) if t not in by_t]
    if missing:
        raise ValueError(f"no box for timesteps {missing[:5]}{'...' if len(missing) > 5 else ''}")
    listed = [(t, by_t[t], k) for t, _, k in [(b[0], b[1], b[2] if len(b) > 2 else "") for b in boxes]]

    def inside(box):
        for a in prop.atoms:
            r = a.range_over(box)
            if (a.sense == ">=" and r.lo < a.rhs + SLACK) or (a.sense == "<=" and r.hi > a.rhs - SLACK):
                return False
        return True

    if prop.modality == "G":
        for t in range(prop.t1, prop.t2 + 1):
            if not inside(by_t[t]):
                return Verdict("inconclusive", listed, message=f"box at t={t} meets the unsafe region", step=t)
        return Verdict("holds", listed)
    for t in range(prop.t1, prop.t2 + 1):
        if inside(by_t[t]):
            return Verdict("holds", listed, message=f"box at t={t} lies in the goal", step=t)
    if all(_disjoint_from_goal(by_t[t], prop) for t in range(prop.t1, prop.t2 + 1)):
        return Verdict("fails", listed, message="never reaches the goal: every box is disjoint from it")
    return Verdict("inconclusive", listed)


# ---------------------------------------------------------------------------
# Feasibility framing
# ---------------------------------------------------------------------------


def _trace(q, witness) -> tuple:
    states = [[witness[v] for v in step] for step in q.states]
    controls = [[witness[v] for v in step] for step in q.controls]
    return states, controls


def replay(loop: ClosedLoop, x0, steps: int, prop: Property, controls=None) -> tuple:
    """Exact rerun from ``x0``; returns (trajectory, first in-range step violating P or None)."""
    if loop.controller is None and controls is None:
        raise ValueError("replay without a controller needs the witness controls")
    traj = loop.simulate(x0, steps, None if loop.controller is not None else controls)
    sat = prop.satisfied(traj)
    for t in range(1, steps + 1):
        if prop.in_range(t) and not sat[t]:
            return traj, t
    return traj, None


def multi_step_feas(loop: ClosedLoop, approximations, input_set, atom_rows) -> tuple:
    """Solve one feasibility query with ``atom_rows`` on the final state.

    Returns ``(status, query, result)`` with status feasible | infeasible | error.
    """
    q = build_query(approximations, loop.controller, list(Box.of(input_set)), negated=atom_rows,
                    allow_tanh=loop.allow_tanh)
    res = loop.solver.check_feasible(q.problem)
    if res.status == "feasible" and q.problem.violations(res.witness):
        return "error", q, res
    return res.status, q, res


def _check_G(loop, approximations, input_set, prop, t, offset, boxes):
    """Negated atoms one at a time; returns a Verdict to stop with, or None."""
    for atom in prop.atoms:
        status, q, res = multi_step_feas(loop, approximations, input_set, [atom.negation()])
        if status == "infeasible":
            continue
        if status == "feasible":
            states, controls = _trace(q, res.witness)
            steps = len(approximations)
            traj, bad = replay(loop, states[0], steps, _shift(prop, offset), controls)
            cex = {"step": t, "start_step": offset, "states": states, "controls": controls,
                   "replay": traj.tolist(), "real": bad is not None}
            if bad is not None:
                return Verdict("fails", boxes, cex, f"real counterexample at t={offset + bad}", t)
            return Verdict("inconclusive", boxes, cex, "abstract counterexample did not replay", t)
        return Verdict("unknown", boxes, None, f"solver gave {status} at t={t}: {res.message}", t)
    return None


def _shift(prop: Property, offset: int) -> Property:
    if offset == 0:
        return prop
    t1 = max(1, prop.t1 - offset)
    t2 = max(t1, prop.t2 - offset)
    return Property(prop.modality, t1, t2, prop.atoms)


def feasibility_G(loop: ClosedLoop, initial, n: int, prop: Property) -> Verdict:
    """Invariant check: ``not P`` at step i from the initial set, domains from one-step boxes."""
    if prop.modality != "G":
        raise ValueError("feasibility_G needs a G property")
    return hs_feasibility_G(loop, initial, n, prop, ResetPolicy("never", 0))


def hs_feasibility_G(loop: ClosedLoop, initial, n: int, prop: Property, reset: ResetPolicy | str = "every:5") -> Verdict:
    """Invariant check that periodically replaces the input set by a symbolic box."""
    if prop.modality != "G":
        raise ValueError("hs_feasibility_G needs a G property")
    if isinstance(reset, str):
        reset = ResetPolicy.parse(reset)
    input_set = Box.of(initial)
    frontier = input_set
    approximations = []
    boxes = []
    offset = 0
    i = 1
    remaining = n
    try:
        while i <= remaining:
            f = loop.overapproximate(frontier)
            approximations.append(f)
            t = offset + i
            if prop.in_range(t):
                stop = _check_G(loop, approximations, input_set, prop, t, offset, boxes)
                if stop is not None:
                    return stop
            if i == remaining:
                break
            if reset.due(i, frontier, input_set):
                frontier = _sym(loop, approximations, input_set, i)
                boxes.append((t, frontier, "symbolic"))
                input_set = frontier
                offset += i
                remaining -= i
                approximations = []
                i = 1
            else:
                frontier = _sym(loop, [f], frontier)
                boxes.append((t, frontier, "concrete"))
                i += 1
    except ReachUnknown as exc:
        return Verdict("unknown", boxes, None, str(exc))
    return Verdict("holds", boxes)


def feasibility_F(loop: ClosedLoop, initial, n: int, prop: Property) -> Verdict:
    """Goal reaching: holds at the first step where every negated atom is infeasible.

    Fails (never reaches) when P itself is infeasible at every in-range step.
    """
    if prop.modality != "F":
        raise ValueError("feasibility_F needs an F property")
    input_set = Box.of(initial)
    frontier = input_set
    approximations = []
    boxes = []
    never = True
    try:
        for i in range(1, n + 1):
            f = loop.overapproximate(frontier)
            approximations.append(f)
            if prop.in_range(i):
                statuses = [multi_step_feas(loop, approximations, input_set, [a.negation()])[0] for a in prop.atoms]
                if "error" in statuses:
                    return Verdict("unknown", boxes, None, f"solver error at t={i}", i)
                if all(s == "infeasible" for s in statuses):
                    return Verdict("holds", boxes, None, f"goal certain at t={i}", i)
                status = multi_step_feas(loop, approximations, input_set, [a.relaxed() for a in prop.atoms])[0]
                if status == "error":
                    return Verdict("unknown", boxes, None, f"solver error at t={i}", i)
                never = never and status == "infeasible"
            if i < n:
                frontier = _sym(loop, [f], frontier)
                boxes.append((i, frontier, "concrete"))
    except ReachUnknown as exc:
        return Verdict("unknown", boxes, None, str(exc))
    if never:
        return Verdict("fails", boxes, None, "never reaches the goal")
    return Verdict("inconclusive", boxes)
