"""Feed-forward controllers: loading, evaluation and interval bounds."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .expr import Interval, as_interval

ACTIVATIONS = ("relu", "linear", "tanh")


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if w.ndim != 2:
            raise NetworkError("weights must be a 2-D matrix")
        if b.shape[0] != w.shape[0]:
            raise NetworkError(f"bias length {b.shape[0]} does not match {w.shape[0]} rows")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NetworkError("non-finite weight or bias")
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


def _activate(kind: str, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


@dataclass(frozen=True)
class Network:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise NetworkError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if b.n_in != a.n_out:
                raise NetworkError(f"layer {i + 1} expects {b.n_in} inputs but layer {i} gives {a.n_out}")
        if layers[-1].activation != "linear":
            raise NetworkError("the output layer must be linear")
        object.__setattr__(self, "layers", layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def shape(self) -> tuple:
        return (self.n_in,) + tuple(l.n_out for l in self.layers)

    @property
    def has_tanh(self) -> bool:
        return any(l.activation == "tanh" for l in self.layers)

    def __call__(self, x):
        return forward(self, x)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"weights": l.weights.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, d) -> Network:
        try:
            raw = d["layers"]
            layers = [Layer(l["weights"], l["bias"], l.get("activation", "relu")) for l in raw]
        except (KeyError, TypeError) as exc:
            raise NetworkError(f"bad network document: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, NetworkError):
                raise
            raise NetworkError(f"bad network document: {exc}") from exc
        return cls(tuple(layers))


def load_network(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: not valid JSON ({exc})") from exc
    return Network.from_dict(doc)


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1) + "\n")


def forward(net: Network, x) -> np.ndarray:
    """Evaluate on one input ``(n_in,)`` or a batch ``(batch, n_in)``."""
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != net.n_in:
        raise NetworkError(f"expected {net.n_in} inputs, got {h.shape[-1]}")
    for layer in net.layers:
        h = _activate(layer.activation, h @ layer.weights.T + layer.bias)
    return h


@dataclass(frozen=True)
class NeuronBounds:
    """Pre-activation bounds per layer (arrays of lower and upper values)."""

    lower: tuple
    upper: tuple

    def layer(self, i: int) -> list[Interval]:
        return [Interval(float(a), float(b)) for a, b in zip(self.lower[i], self.upper[i])]

    def __len__(self) -> int:
        return len(self.lower)


def _affine_bounds(w: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    mid = w @ c + b
    rad = np.abs(w) @ r
    # outward pad for rounding in the products above
    pad = 1e-12 * (np.abs(w) @ np.abs(c) + rad + np.abs(b)) + 1e-300
    return mid - rad - pad, mid + rad + pad


def _box_arrays(box: Sequence, n: int):
    ivs = [as_interval(d) for d in box]
    if len(ivs) != n:
        raise NetworkError(f"box has {len(ivs)} dims, network expects {n}")
    lo = np.array([d.lo for d in ivs])
    hi = np.array([d.hi for d in ivs])
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise NetworkError("input box must be finite")
    return lo, hi


def neuron_bounds(net: Network, box) -> NeuronBounds:
    """Interval forward pass; sound for every input in ``box``."""
    lo, hi = _box_arrays(box, net.n_in)
    lows, highs = [], []
    for layer in net.layers:
        zl, zh = _affine_bounds(layer.weights, layer.bias, lo, hi)
        lows.append(zl)
        highs.append(zh)
        lo, hi = _activate(layer.activation, zl), _activate(layer.activation, zh)
    return NeuronBounds(tuple(lows), tuple(highs))


def output_range(net: Network, box, method: str = "interval", solver=None) -> list[Interval]:
    """Sound box containing ``net(x)`` for all ``x`` in ``box``.

    ``method="mip"`` returns the exact per-output range, with each end
    taken from the solver's certified bound.
    """
    if method == "interval":
        nb = neuron_bounds(net, box)
        return nb.layer(len(nb) - 1)
    if method == "mip":
        from .mip.encode import network_output_range

        return network_output_range(net, box, solver=solver)
    raise ValueError(f"unknown output range method {method!r}")
