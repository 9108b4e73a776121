"""Built-in closed-loop benchmarks and the Monte Carlo oracle.

Each benchmark ships a small deterministic controller in ``data/``; the
builders below regenerate them bit for bit. Sampling is uniform over the
initial box with ``numpy.random.default_rng(seed)``, row by row, so a
larger draw with the same seed extends a smaller one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .bounds1d import ApproxParams
from .nn import Layer, Network, forward
from .overapprox import SystemSpec
from .reach import Box, ConcretizationSchedule, Property

# ACC safe-distance constants
D_MIN = 10.0
T_GAP = 1.4

SYSTEMS = {
    "pendulum": {
        "name": "pendulum",
        "states": ["x1", "x2"],
        "controls": ["u"],
        "params": {"m": 0.5, "l": 0.5, "g": 1.0, "dt": 0.1},
        "updates": ["x1 + dt*x2", "x2 + dt*(g/l*sin(x1) + 1/(m*l^2)*u)"],
    },
    "tora": {
        "name": "tora",
        "states": ["x1", "x2", "x3", "x4"],
        "controls": ["u"],
        "params": {"eps": 0.1, "dt": 0.1},
        "updates": ["x1 + dt*x2", "x2 + dt*(eps*sin(x3) - x1)", "x3 + dt*x4", "x4 + dt*u"],
    },
    "car": {
        "name": "car",
        "states": ["x1", "x2", "x3", "x4"],
        "controls": ["u1", "u2"],
        "params": {"dt": 0.2},
        "updates": ["x1 + dt*x4*cos(x3)", "x2 + dt*x4*sin(x3)", "x3 + dt*u2", "x4 + dt*u1"],
    },
    "acc": {
        "name": "acc",
        "states": ["x1", "x2", "x3", "x4", "x5", "x6"],
        "controls": ["u"],
        "params": {"a": -2.0, "mu": 1e-4, "dt": 0.1},
        "updates": [
            "x1 + dt*x2",
            "x2 + dt*x3",
            "x3 + dt*(-2*x3 + 2*a - 2*mu*x2^2)",
            "x4 + dt*x5",
            "x5 + dt*x6",
            "x6 + dt*(-2*x6 + 2*u - 2*mu*x5^2)",
        ],
    },
}

# (modality, t1, t2, atoms); horizons match t2
PROPERTIES = {
    "pendulum": ("G", 1, 25, ["x1 >= -0.2167"]),
    "tora": ("G", 1, 15, ["x1 >= -2", "x1 <= 2"]),
    "car": ("F", 1, 10, ["x1 >= -0.6", "x1 <= 0.6", "x2 >= -0.2", "x2 <= 0.2"]),
    "acc": ("G", 1, 55, [f"x1 - x4 >= {T_GAP}*x5 + {D_MIN}"]),
}

INITIAL = {
    "pendulum": [[1.0, 1.2], [0.0, 0.2]],
    "tora": [[0.6, 0.7], [-0.7, -0.6], [-0.4, -0.3], [0.5, 0.6]],
    "car": [[9.5, 9.55], [-4.5, -4.45], [2.1, 2.11], [1.5, 1.51]],
    "acc": [[90.0, 91.0], [10.0, 11.0], [30.0, 30.2], [30.0, 30.2], [0.0, 0.01], [0.0, 0.01]],
}

SCHEDULES = {
    "pendulum": (5, 5, 5, 5, 5),
    "tora": (5, 5, 5),
    "car": (5, 5),
    "acc": (5,) * 11,
}

# controller output clamps, one (lo, hi) per control
CONTROL_RANGES = {
    "pendulum": [(-1.0, 1.0)],
    "tora": [(-1.0, 1.0)],
    "car": [(-1.0, 1.0), (-0.5, 0.5)],
    "acc": [(-3.0, 2.0)],
}

# the exp/log product rewrite of the car needs many binaries at finer settings
PARAMS = {"car": ApproxParams(n=1)}

CONTROLLER_FILES = {
    "pendulum": "pendulum_lqr_2x8x8x1.json",
    "tora": "tora_4x8x8x2x1.json",
    "car": "car_4x8x4x2.json",
    "acc": "acc_6x8x2x1.json",
}


@dataclass(frozen=True)
class BenchmarkInstance:
    name: str
    system: SystemSpec
    property: Property
    initial: Box
    horizon: int
    schedule: ConcretizationSchedule
    control_ranges: tuple = ()
    params: ApproxParams = field(default_factory=ApproxParams)

    @property
    def states(self) -> list:
        return list(self.system.states)


@dataclass
class Trajectory:
    states: np.ndarray  # (steps + 1, n)
    controls: np.ndarray  # (steps, m)

    def __len__(self):
        return len(self.states)

    def residual(self, system: SystemSpec) -> float:
        """Largest deviation from the exact update over the trajectory."""
        if len(self.controls) == 0:
            return 0.0
        nxt = system.step(self.states[:-1].T, self.controls.T).T
        return float(np.max(np.abs(nxt - self.states[1:]))) if nxt.size else 0.0


def get_system(name: str) -> BenchmarkInstance:
    try:
        raw = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(SYSTEMS)}") from None
    system = SystemSpec.from_dict(raw)
    mod, t1, t2, atoms = PROPERTIES[name]
    return BenchmarkInstance(
        name,
        system,
        Property.parse(mod, t1, t2, atoms, raw["states"]),
        Box.of(INITIAL[name]),
        t2,
        ConcretizationSchedule(SCHEDULES[name]),
        tuple(CONTROL_RANGES[name]),
        PARAMS.get(name, ApproxParams()),
    )


def acc_measurement(x) -> np.ndarray:
    """Safe-distance margin ``y = x_lead - x_ego - T_gap * v_ego``; safe iff ``y >= D_MIN``."""
    x = np.asarray(x, dtype=float)
    return x[..., 0] - x[..., 3] - T_GAP * x[..., 4]


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------


def clamp_layers(hidden_out: int, w, b, ranges) -> tuple:
    """Relu pair plus linear layer computing ``clip(w h + b, lo, hi)`` per output.

    relu(z - lo) - relu(z - hi) + lo equals the clip for lo <= hi.
    """
    w = np.asarray(w, dtype=float).reshape(len(ranges), hidden_out)
    b = np.asarray(b, dtype=float)
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    k = len(ranges)
    relu = Layer(np.vstack([w, w]), np.concatenate([b - lo, b - hi]), "relu")
    out = np.hstack([np.eye(k), -np.eye(k)])
    return relu, Layer(out, lo, "linear")


def pendulum_controller() -> Network:
    """LQR feedback on the linearization, clipped to the torque range.

    Gain from the discrete Riccati equation with Q = diag(1, 0.1), R = 1,
    rounded to 3 digits. Only two neurons per hidden layer are live; the
    rest are zero-weight padding to fill the 8-wide layers.
    """
    k = np.array([1.052, 0.588])
    w1 = np.zeros((8, 2))
    w1[0], w1[1] = -k, k  # relu(u) and relu(-u) for u = -k.x
    relu, out = clamp_layers(8, np.r_[1.0, -1.0, np.zeros(6)], [0.0], CONTROL_RANGES["pendulum"])
    w2 = np.zeros((8, 8))
    b2 = np.zeros(8)
    w2[:2], b2[:2] = relu.weights, relu.bias
    return Network((Layer(w1, np.zeros(8), "relu"), Layer(w2, b2, "relu"), Layer(np.pad(out.weights, ((0, 0), (0, 6))), out.bias, "linear")))


def random_controller(seed: int, box, hidden: tuple, ranges) -> Network:
    """Fixed-seed relu net with a clamped output, inputs scaled to the box."""
    rng = np.random.default_rng(seed)
    box = Box.of(box)
    center = 0.5 * (box.lo + box.hi)
    scale = 1.0 / (1.0 + np.abs(center))
    layers = []
    n = box.dim
    for i, h in enumerate(hidden):
        w = rng.normal(0.0, 1.0 / np.sqrt(n), size=(h, n))
        if i == 0:
            w = w * scale
        b = rng.normal(0.0, 0.1, size=h)
        layers.append(Layer(np.round(w, 6), np.round(b, 6), "relu"))
        n = h
    w = np.round(rng.normal(0.0, 1.0 / np.sqrt(n), size=(len(ranges), n)), 6)
    layers.extend(clamp_layers(n, w, np.zeros(len(ranges)), ranges))
    return Network(tuple(layers))


def build_controller(name: str) -> Network:
    if name == "pendulum":
        return pendulum_controller()
    hidden = {"tora": (8, 8), "car": (8,), "acc": (8,)}[name]
    seed = {"tora": 11, "car": 12, "acc": 13}[name]
    return random_controller(seed, INITIAL[name], hidden, CONTROL_RANGES[name])


def load_controller(name: str) -> Network:
    """The shipped controller for a benchmark."""
    if name not in CONTROLLER_FILES:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(SYSTEMS)}")
    text = resources.files("overt.data").joinpath(CONTROLLER_FILES[name]).read_text()
    return Network.from_dict(json.loads(text))


def zero_controller(instance: BenchmarkInstance) -> Network:
    n, m = instance.system.n_states, len(instance.system.controls)
    return Network((Layer(np.zeros((m, n)), np.zeros(m), "linear"),))


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def sample_initial(box, samples: int, seed: int) -> np.ndarray:
    if samples < 1:
        raise ValueError("need at least one sample")
    box = Box.of(box)
    rng = np.random.default_rng(seed)
    return box.lo + (box.hi - box.lo) * rng.random((samples, box.dim))


def simulate_mc(instance: BenchmarkInstance, controller: Network | None, samples: int, seed: int = 0,
                steps: int | None = None, initial=None) -> tuple:
    """Return ``(trajectories, hulls)``; ``hulls[t]`` is the sample envelope at step t.

    ``controller=None`` applies zero control.
    """
    steps = instance.horizon if steps is None else steps
    box = Box.of(instance.initial if initial is None else initial)
    sys_ = instance.system
    m = len(sys_.controls)
    if controller is not None and (controller.n_in != sys_.n_states or controller.n_out != m):
        raise ValueError(f"controller shape {controller.shape} does not fit {instance.name}")
    x = sample_initial(box, samples, seed)
    xs = [x]
    us = []
    for _ in range(steps):
        u = forward(controller, x) if controller is not None else np.zeros((samples, m))
        u = np.asarray(u, dtype=float).reshape(samples, m)
        x = sys_.step(x.T, u.T).T
        xs.append(x)
        us.append(u)
    states = np.stack(xs, axis=1)
    controls = np.stack(us, axis=1) if us else np.zeros((samples, 0, m))
    hulls = [Box.hull(states[:, t, :]) for t in range(steps + 1)]
    return [Trajectory(states[i], controls[i]) for i in range(samples)], hulls


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def query_document(instance: BenchmarkInstance, system_file: str = "system.json",
                   controller_file: str = "controller.json") -> dict:
    return {
        "system": system_file,
        "controller": controller_file,
        "initial": instance.initial.to_list(),
        "property": instance.property.to_dict(instance.states),
        "horizon": instance.horizon,
        "schedule": list(instance.schedule.segments),
    }


def export_benchmark(name: str, directory) -> dict:
    """Write system, controller and query files; returns the paths."""
    inst = get_system(name)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"system": d / "system.json", "controller": d / "controller.json", "query": d / "query.json"}
    paths["system"].write_text(json.dumps(SYSTEMS[name], indent=1) + "\n")
    paths["controller"].write_text(json.dumps(load_controller(name).to_dict(), indent=1) + "\n")
    paths["query"].write_text(json.dumps(query_document(inst), indent=1) + "\n")
    return paths
