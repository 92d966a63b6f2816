"""The two-input boolean conjunction toy and its linear network."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from iit import autodiff as ad
from iit.errors import ShapeError
from iit.network import LayeredNetwork, Site
from iit.scm import build_model
from iit.tasks.base import Task

BOOL = (False, True)

INITIAL_PARAMS = {
    "W1": [0.45, 0.05],
    "W2": [0.05, 0.5],
    "w": [1.0, 1.0],
    "b": -1.0,
}

# reported parameters after one IIT update on base (T, F), source (F, T), V2
UPDATED_PARAMS = {
    "W1": [0.5012, 0.05],
    "W2": [0.05, 0.5512],
    "w": [1.0231, 1.0256],
    "b": -0.9488,
}

_SHAPES = {"W1": (2, 1), "W2": (2, 1), "w": (2, 1), "b": (1, 1)}


def conjunction_model():
    return build_model(
        ["B1", "B2", "V1", "V2", "O"],
        {"V1": ["B1"], "V2": ["B2"], "O": ["V1", "V2"]},
        {"B1": BOOL, "B2": BOOL, "V1": BOOL, "V2": BOOL, "O": BOOL},
        {"V1": lambda b1: b1, "V2": lambda b2: b2, "O": lambda v1, v2: v1 and v2},
    )


def _encode(settings):
    return [[float(s["B1"]), float(s["B2"])] for s in settings]


def conjunction_network(params: Mapping | None = None) -> LayeredNetwork:
    """H1 = W1.x, H2 = W2.x, y = w.[H1; H2] + b."""
    raw = dict(INITIAL_PARAMS if params is None else params)
    arrays = {}
    for name, shape in _SHAPES.items():
        a = np.asarray(raw[name], dtype=np.float64)
        if a.size != shape[0] * shape[1]:
            raise ShapeError(f"{name} needs {shape[0] * shape[1]} entries, got {a.size}")
        arrays[name] = a.reshape(shape)

    def hidden(p, x):
        return ad.concat([x @ p["W1"], x @ p["W2"]])

    def output(p, h):
        return h @ p["w"] + ad.broadcast_rows(p["b"], h.shape[0])

    return LayeredNetwork(
        arrays, 2, [("hidden", 2, hidden), ("output", 1, output)],
        {"H1": Site("hidden", 0, 1), "H2": Site("hidden", 1, 2)}, _encode)


class ConjunctionTask(Task):
    name = "conjunction"
    output_var = "O"

    def __init__(self, params: Mapping | None = None):
        self.causal = conjunction_model()
        self.net = conjunction_network(params)
        self.pi = {"V1": "H1", "V2": "H2"}

    @staticmethod
    def kappa(y: float) -> bool:
        return bool(y > 0)

    def key(self, setting):
        return (setting["B1"], setting["B2"])

    def predict(self, output):
        return [self.kappa(y) for y in output.value[:, 0]]

    def loss(self, output, labels, weights=None):
        return ad.logistic_loss(output, [float(v) for v in labels], weights)

    def inputs(self):
        return [{"B1": a, "B2": b} for a in BOOL for b in BOOL]

    def params_flat(self) -> dict:
        p = self.net.params
        return {"W1": p["W1"].ravel().tolist(), "W2": p["W2"].ravel().tolist(),
                "w": p["w"].ravel().tolist(), "b": float(p["b"][0, 0])}


def build_conjunction(initial_params: Mapping | None = None) -> tuple[ConjunctionTask, LayeredNetwork]:
    task = ConjunctionTask(initial_params)
    return task, task.net
