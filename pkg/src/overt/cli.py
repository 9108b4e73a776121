"""Command-line front end.

Exit codes: 0 holds or completed, 1 fails, 2 inconclusive or unknown,
3 usage or I/O error. Stdout carries one verdict line; results go to
``--out`` as JSON. ``--out -`` puts the JSON on stdout and moves the verdict
line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import benchmarks
from .bounds1d import ApproxParams, overapprox_unary, to_closed_form
from .expr import ExprError, Interval, Var, convert_mul_div, free_vars, parse, to_string, unary_view
from .mip import MipError, get_solver
from .nn import NetworkError, load_network
from .overapprox import EQ, Constraint, SystemSpec, approximate, compact_affine, propagate_ranges, rewrite
from .reach import (
    Box,
    ClosedLoop,
    ConcretizationSchedule,
    Property,
    ReachUnknown,
    ResetPolicy,
    Verdict,
    compute_reach_sets,
    evaluate_property,
    feasibility_F,
    feasibility_G,
    hs_feasibility_G,
)

EXIT = {"holds": 0, "completed": 0, "fails": 1, "inconclusive": 2, "unknown": 2}
USAGE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE)


# keys a --config file may set; flags override them
CONFIG_KEYS = (
    "benchmark", "system", "controller", "control_box", "initial", "property", "horizon", "schedule",
    "n", "rel_error", "eps", "solver", "node_limit", "time_limit", "control_method", "seed", "samples",
    "reset", "jobs", "out", "csv", "timing", "expr", "domain",
)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="overt", description="Reachability and feasibility checks for neural-network control loops.")
    sub = p.add_subparsers(dest="mode", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with defaults for any flag")
        sp.add_argument("--out", help="result JSON path; '-' for stdout")
        sp.add_argument("--n", type=int, help="segments per curvature region")
        sp.add_argument("--rel-error", dest="rel_error", type=float, help="bound error target relative to max|f|")
        sp.add_argument("--eps", type=float, help="strictness shift of the bounds")
        sp.add_argument("--timing", action="store_true", default=None, help="record wall-clock seconds")

    def loop(sp):
        common(sp)
        sp.add_argument("--benchmark", choices=sorted(benchmarks.SYSTEMS))
        sp.add_argument("--system", help="system JSON file")
        sp.add_argument("--controller", help="network JSON file, or 'none' for free controls")
        sp.add_argument("--control-box", dest="control_box", help="control ranges 'lo,hi;...' when uncontrolled")
        sp.add_argument("--initial", help="initial box 'lo,hi;lo,hi;...'")
        sp.add_argument("--property", help="e.g. 'G[1,10] x1 >= -0.2167 & x2 <= 1'")
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--solver", help="reference | highs (default: $OVERT_SOLVER or reference)")
        sp.add_argument("--node-limit", dest="node_limit", type=int)
        sp.add_argument("--time-limit", dest="time_limit", type=float)
        sp.add_argument("--control-method", dest="control_method", choices=["interval", "mip"])
        sp.add_argument("--jobs", type=int, help="concurrent solver instances")
        sp.add_argument("--csv", help="also write per-timestep boxes as CSV")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("reach", help="hybrid-symbolic reachable sets")
    loop(sp)
    sp.add_argument("--schedule", help="segment lengths, e.g. 5,5")
    sp = sub.add_parser("feas", help="feasibility framing (G or F)")
    loop(sp)
    sp = sub.add_parser("hsfeas", help="hybrid-symbolic feasibility (G)")
    loop(sp)
    sp.add_argument("--reset", help="never | every:K | growth:F (default every:5)")
    sp = sub.add_parser("simulate", help="Monte Carlo simulation hulls")
    loop(sp)
    sp.add_argument("--samples", type=int)
    sp = sub.add_parser("approx", help="piecewise-linear bounds of an expression")
    common(sp)
    sp.add_argument("--expr")
    sp.add_argument("--domain", action="append", help="'lo,hi' for one variable, or 'name=lo,hi' (repeatable)")
    return p


# ---------------------------------------------------------------------------
# Option handling
# ---------------------------------------------------------------------------


def _merge(args: argparse.Namespace) -> dict:
    """Flags over config file over nothing; config paths are relative to the file."""
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            cfg = json.loads(path.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(cfg) - set(CONFIG_KEYS) - {"mode", "params"}
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        cfg = dict(cfg)
        for k, v in (cfg.pop("params", None) or {}).items():
            cfg.setdefault(k, v)
        for k in ("system", "controller"):
            if isinstance(cfg.get(k), str) and cfg[k] != "none":
                cfg[k] = str(path.parent / cfg[k])
    opts = {k: cfg.get(k) for k in CONFIG_KEYS}
    for k, v in vars(args).items():
        if v is not None and k != "config":
            opts[k] = v
    opts["mode"] = args.mode
    return opts


def _floats(text: str, what: str) -> list:
    try:
        return [float(v) for v in str(text).split(",")]
    except ValueError:
        raise UsageError(f"bad {what}: {text!r}") from None


def parse_box(spec) -> Box:
    if isinstance(spec, str):
        spec = [_floats(part, "box") for part in spec.split(";") if part.strip()]
    try:
        return Box.of([Interval(*d) for d in spec])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad box {spec!r}: {exc}") from None


_PROP = re.compile(r"^\s*([GF])\s*\[\s*(\d+)\s*,\s*(\d+)\s*\]\s*(.+)$")


def parse_property(spec, states) -> Property:
    try:
        if isinstance(spec, dict):
            return Property.parse(spec["modality"], spec["t1"], spec["t2"], spec["atoms"], states)
        m = _PROP.match(str(spec))
        if not m:
            raise ValueError("expected 'G[t1,t2] atom & atom'")
        atoms = [a for a in m.group(4).split("&") if a.strip()]
        return Property.parse(m.group(1), int(m.group(2)), int(m.group(3)), atoms, states)
    except (KeyError, ValueError, ExprError) as exc:
        raise UsageError(f"bad property {spec!r}: {exc}") from None


def _params(opts, default: ApproxParams) -> ApproxParams:
    if opts["n"] is None and opts["rel_error"] is None and opts["eps"] is None:
        return default
    if opts["n"] is not None and opts["rel_error"] is not None:
        raise UsageError("give either --n or --rel-error, not both")
    kw = {}
    if opts["n"] is not None:
        kw["n"] = opts["n"]
    elif opts["rel_error"] is not None:
        kw["rel_error"] = opts["rel_error"]
    elif default.n is not None:
        kw["n"] = default.n
    else:
        kw["rel_error"] = default.rel_error
    if opts["eps"] is not None:
        kw["eps"] = opts["eps"]
    try:
        return ApproxParams(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def setup(opts) -> dict:
    """Resolve system, controller, sets and property from options."""
    if opts["benchmark"] and opts["system"]:
        raise UsageError("give either --benchmark or --system, not both")
    inst = None
    if opts["benchmark"]:
        try:
            inst = benchmarks.get_system(opts["benchmark"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        system = inst.system
    elif opts["system"]:
        try:
            system = SystemSpec.load(opts["system"])
        except OSError as exc:
            raise UsageError(f"cannot read system {opts['system']}: {exc.strerror}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad system file {opts['system']}: {exc}") from None
    else:
        raise UsageError("one of --benchmark or --system is required")

    ctrl_spec = opts["controller"]
    if ctrl_spec == "none":
        controller = None
    elif ctrl_spec:
        try:
            controller = load_network(ctrl_spec)
        except OSError as exc:
            raise UsageError(f"cannot read controller {ctrl_spec}: {exc.strerror}") from None
        except NetworkError as exc:
            raise UsageError(str(exc)) from None
    elif inst is not None:
        controller = benchmarks.load_controller(inst.name)
    elif system.controls:
        raise UsageError("--controller is required with --system")
    else:
        controller = None

    control_box = None
    if opts["control_box"] is not None:
        control_box = list(parse_box(opts["control_box"]))
    elif controller is None and system.controls:
        if inst is None:
            raise UsageError("free controls need --control-box")
        control_box = [Interval(*r) for r in inst.control_ranges]

    initial = parse_box(opts["initial"]) if opts["initial"] is not None else (inst.initial if inst else None)
    if initial is None:
        raise UsageError("--initial is required with --system")
    if initial.dim != system.n_states:
        raise UsageError(f"initial box has {initial.dim} dims, system has {system.n_states} states")
    prop = parse_property(opts["property"], system.states) if opts["property"] is not None else (inst.property if inst else None)
    horizon = opts["horizon"] if opts["horizon"] is not None else (inst.horizon if inst else (prop.t2 if prop else None))
    if horizon is None or horizon < 1:
        raise UsageError("a positive --horizon is required")
    params = _params(opts, inst.params if inst else ApproxParams())
    solver_kw = {k: opts[k] for k in ("node_limit", "time_limit") if opts[k] is not None}
    try:
        solver = get_solver(opts["solver"], **solver_kw)
        loop = ClosedLoop(system, controller, control_box, params, opts["control_method"] or "interval",
                          solver, max(1, int(opts["jobs"] or 1)))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return {"instance": inst, "system": system, "controller": controller, "loop": loop, "initial": initial,
            "property": prop, "horizon": int(horizon)}


def _clip_property(prop: Property | None, horizon: int) -> Property | None:
    if prop is None or prop.t1 > horizon:
        return None
    return Property(prop.modality, prop.t1, min(prop.t2, horizon), prop.atoms)


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


def _timesteps(boxes) -> list:
    return [{"t": int(t), "box": b.to_list(), "kind": k} for t, b, k in boxes]


def _verdict_doc(v: Verdict, boxes) -> dict:
    return {"timesteps": _timesteps(boxes), "verdict": v.status, "counterexample": v.counterexample}


def run_reach(opts) -> tuple:
    s = setup(opts)
    H = s["horizon"]
    sched = opts.get("schedule")
    if sched is None:
        inst = s["instance"]
        sched = inst.schedule if inst is not None and inst.schedule.horizon == H else ConcretizationSchedule((H,))
    try:
        if not isinstance(sched, ConcretizationSchedule):
            sched = ConcretizationSchedule(tuple(sched)) if isinstance(sched, list) else ConcretizationSchedule.parse(sched)
        sched.check(H)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    prop = _clip_property(s["property"], H)
    try:
        boxes = compute_reach_sets(s["loop"], s["initial"], sched)
    except ReachUnknown as exc:
        return {"timesteps": _timesteps(exc.partial), "verdict": "unknown", "counterexample": None}, f"UNKNOWN {exc}"
    if prop is None:
        return {"timesteps": _timesteps(boxes), "verdict": "completed", "counterexample": None}, "COMPLETED no property in range"
    v = evaluate_property(boxes, prop)
    line = v.status.upper()
    if v.status == "fails" and prop.modality == "F":
        line += " never reaches the goal"
    return _verdict_doc(v, boxes), line + (f" ({v.message})" if v.message and v.status != "fails" else "")


def run_feas(opts, hybrid: bool) -> tuple:
    s = setup(opts)
    H = s["horizon"]
    prop = _clip_property(s["property"], H)
    if prop is None:
        raise UsageError("feasibility needs a property within the horizon")
    if prop.modality == "F":
        if hybrid:
            raise UsageError("hsfeas handles G properties only")
        v = feasibility_F(s["loop"], s["initial"], H, prop)
    elif hybrid:
        try:
            reset = ResetPolicy.parse(opts["reset"] or "every:5")
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        v = hs_feasibility_G(s["loop"], s["initial"], H, prop, reset)
    else:
        v = feasibility_G(s["loop"], s["initial"], H, prop)
    line = v.status.upper()
    if v.step is not None:
        line += f" at t={v.step}"
    if v.message:
        line += f" ({v.message})"
    return _verdict_doc(v, v.boxes), line


def run_simulate(opts) -> tuple:
    s = setup(opts)
    inst = s["instance"] or benchmarks.BenchmarkInstance(
        s["system"].name, s["system"], s["property"], s["initial"], s["horizon"],
        ConcretizationSchedule((s["horizon"],)))
    samples = int(opts["samples"] or 1000)
    seed = int(opts["seed"] if opts["seed"] is not None else 0)
    try:
        trajs, hulls = benchmarks.simulate_mc(inst, s["controller"], samples, seed, s["horizon"], s["initial"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    steps = [(t, h, "mc") for t, h in enumerate(hulls) if t >= 1]
    doc = {"timesteps": _timesteps(steps), "verdict": "completed", "counterexample": None}
    prop = _clip_property(s["property"], s["horizon"])
    if prop is not None:
        states = np.stack([t.states for t in trajs])
        bad = [t for t in range(prop.t1, prop.t2 + 1) if not prop.satisfied(states[:, t, :]).all()]
        doc["violations"] = bad if prop.modality == "G" else None
    return doc, f"COMPLETED {samples} samples, seed {seed}"


def _domains(spec, names) -> dict:
    if not spec:
        raise UsageError("--domain is required")
    out = {}
    for item in spec:
        if "=" in item:
            k, _, rng = item.partition("=")
            out[k.strip()] = Interval(*_floats(rng, "domain"))
        elif len(names) == 1:
            out[names[0]] = Interval(*_floats(item, "domain"))
        else:
            raise UsageError("name each domain ('x=lo,hi') when the expression has several variables")
    missing = set(names) - set(out)
    if missing:
        raise UsageError(f"no domain for {sorted(missing)}")
    return out


def run_approx(opts) -> tuple:
    if not opts["expr"]:
        raise UsageError("--expr is required")
    try:
        e = parse(opts["expr"])
    except ExprError as exc:
        raise UsageError(str(exc)) from None
    names = sorted(free_vars(e))
    spec = opts["domain"]
    if isinstance(spec, str):
        spec = [spec]
    doms = _domains(spec, names)
    params = _params(opts, ApproxParams())
    view = unary_view(e)
    try:
        if view is not None and isinstance(view[2], Var):
            tag, param, arg = view
            ub, lb = overapprox_unary(tag, doms[arg.name], params, param)
            doc = {"expr": to_string(e), "domain": [doms[arg.name].lo, doms[arg.name].hi], "params": params.to_dict()}
            for key, b in (("upper", ub), ("lower", lb)):
                doc[key] = dict(b.to_dict(), closed_form=to_string(to_closed_form(b, arg)))
            return doc, f"COMPLETED {ub.n_segments}+{lb.n_segments} segments"
        converted, _ = convert_mul_div(e, doms, params.xi)
        out, rows = rewrite(converted)
        if not isinstance(out, Var) or out.name in doms:
            name = "out"
            while name in doms or any(c.var == name for c in rows):
                name += "_"
            rows.append(Constraint(name, EQ, out))
            out = Var(name)
        oa = approximate(rows, propagate_ranges(rows, doms), params, inputs=names, outputs=[out.name])
        oa = compact_affine(oa)
    except (ExprError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    doc = {"expr": to_string(e), "overapproximation": oa.to_dict()}
    return doc, f"COMPLETED {oa.nonlinear_count()} nonlinear terms"


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_csv(path, timesteps) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "kind", "dim", "lo", "hi"])
        for row in timesteps:
            for k, (lo, hi) in enumerate(row["box"]):
                w.writerow([row["t"], row["kind"], k + 1, repr(lo), repr(hi)])


# flags whose values may start with a minus sign
_NUMERIC_FLAGS = ("--initial", "--domain", "--control-box")


def _join_negative(argv: list) -> list:
    out = []
    it = iter(argv)
    for tok in it:
        if tok in _NUMERIC_FLAGS:
            nxt = next(it, None)
            if nxt is not None and nxt.startswith("-") and not nxt.startswith("--"):
                out.append(f"{tok}={nxt}")
                continue
            out.append(tok)
            if nxt is not None:
                out.append(nxt)
            continue
        out.append(tok)
    return out


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_negative(list(sys.argv[1:] if argv is None else argv)))
    t0 = time.perf_counter()
    try:
        opts = _merge(args)
        mode = opts["mode"]
        if mode == "reach":
            doc, line = run_reach(opts)
        elif mode in ("feas", "hsfeas"):
            doc, line = run_feas(opts, mode == "hsfeas")
        elif mode == "simulate":
            doc, line = run_simulate(opts)
        else:
            doc, line = run_approx(opts)
        if mode != "approx":
            doc["timing"] = round(time.perf_counter() - t0, 6) if opts["timing"] else None
        text = json.dumps(doc, indent=1) + "\n"
        to_stdout = opts["out"] == "-"
        if to_stdout:
            sys.stdout.write(text)
        elif opts["out"]:
            Path(opts["out"]).write_text(text)
        if opts.get("csv") and "timesteps" in doc:
            write_csv(opts["csv"], doc["timesteps"])
    except UsageError as exc:
        print(f"overt: error: {exc}", file=sys.stderr)
        return USAGE
    except OSError as exc:
        print(f"overt: error: {exc}", file=sys.stderr)
        return USAGE
    except MipError as exc:
        print(f"UNKNOWN solver problem: {exc}")
        return EXIT["unknown"]
    # keep stdout parseable when it carries the JSON
    print(line, file=sys.stderr if to_stdout else sys.stdout)
    return EXIT.get(doc.get("verdict", "completed"), 2)


def main(argv=None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
