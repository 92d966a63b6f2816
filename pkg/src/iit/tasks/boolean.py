"""Random boolean circuits paired with ReLU networks that implement them exactly.

Any two-input boolean gate is affine in ``(a, b, a AND b)`` and, on bits,
``a AND b = relu(a + b - 1)``. So every gate becomes a ReLU stage that
exposes ``(a, b, relu(a + b - 1))`` followed by an affine stage whose unit
is the gate value. Each intermediate gate gets a width-1 site, so the
network is a perfect low-level model of its circuit.
"""
from __future__ import annotations

import itertools

import numpy as np

from iit import autodiff as ad
from iit.network import LayeredNetwork, Site
from iit.scm import build_model
from iit.tasks.base import Task

BOOL = (False, True)


def gate_coefficients(table: tuple[int, int, int, int]) -> tuple[float, float, float, float]:
    """``(c0, c1, c2, c3)`` with ``f(a, b) = c0 + c1 a + c2 b + c3 ab`` for truth table f(00), f(01), f(10), f(11)."""
    f00, f01, f10, f11 = table
    return float(f00), float(f10 - f00), float(f01 - f00), float(f11 - f10 - f01 + f00)


def _gate_fn(table):
    def gate(a, b):
        return bool(table[2 * int(a) + int(b)])
    return gate


def _wiring(rng, n_inputs, widths):
    """Parent indices (into the previous level) and a truth table per gate, level by level.

    Every node of a level feeds at least one gate of the next, so the only
    childless variable is the output.
    """
    levels, prev = [], n_inputs
    for width in widths:
        if 2 * width < prev:
            raise ValueError(f"{width} gates cannot read all {prev} nodes")
        slots = list(rng.permutation(prev)) + list(rng.integers(0, prev, size=2 * width - prev))
        gates = []
        for g in range(width):
            a, b = int(slots[2 * g]), int(slots[2 * g + 1])
            while b == a:
                b = int(rng.integers(prev))
            gates.append(((a, b), tuple(int(x) for x in rng.integers(0, 2, size=4))))
        levels.append(gates)
        prev = width
    return levels


def _stage_params(gates, n_prev, tag):
    """Weights for one ReLU stage and the affine stage that follows it."""
    pre = np.zeros((n_prev, 3 * len(gates)))
    pre_b = np.zeros((1, 3 * len(gates)))
    post = np.zeros((3 * len(gates), len(gates)))
    post_b = np.zeros((1, len(gates)))
    for g, ((a, b), table) in enumerate(gates):
        pre[a, 3 * g] = 1.0
        pre[b, 3 * g + 1] = 1.0
        pre[a, 3 * g + 2] = pre[b, 3 * g + 2] = 1.0
        pre_b[0, 3 * g + 2] = -1.0
        c0, c1, c2, c3 = gate_coefficients(table)
        post[3 * g:3 * g + 3, g] = (c1, c2, c3)
        post_b[0, g] = c0
    return {f"{tag}.pre.W": pre, f"{tag}.pre.b": pre_b, f"{tag}.W": post, f"{tag}.b": post_b}


def _relu_stage(tag):
    return lambda p, x: ad.relu(x @ p[f"{tag}.pre.W"] + ad.broadcast_rows(p[f"{tag}.pre.b"], x.shape[0]))


def _affine_stage(tag):
    return lambda p, x: x @ p[f"{tag}.W"] + ad.broadcast_rows(p[f"{tag}.b"], x.shape[0])


class BooleanCircuitTask(Task):
    """A random layered circuit: inputs, one or more gate levels, one output gate."""

    name = "boolean"
    output_var = "O"

    def __init__(self, seed: int, n_inputs: int | None = None, widths=None):
        rng = np.random.default_rng(seed)
        n_inputs = n_inputs or int(rng.integers(2, 5))
        if widths is None:
            depth = int(rng.integers(1, 3))
            widths = [int(rng.integers(2, 4)) for _ in range(depth - 1)] + [2]
        levels = _wiring(rng, n_inputs, list(widths) + [1])
        self.levels = levels
        inputs = [f"X{i}" for i in range(n_inputs)]
        names = [[f"G{d}_{g}" for g in range(len(gates))] for d, gates in enumerate(levels[:-1])]
        names.append(["O"])

        variables, parents, equations = list(inputs), {}, {}
        prev = inputs
        for level, gates in zip(names, levels):
            for name, ((a, b), table) in zip(level, gates):
                variables.append(name)
                parents[name] = [prev[a], prev[b]]
                equations[name] = _gate_fn(table)
            prev = level
        spaces = {v: BOOL for v in variables}
        self.causal = build_model(variables, parents, spaces, equations)

        params, stages, sites = {}, [], {}
        n_prev = n_inputs
        for d, gates in enumerate(levels):
            tag = f"L{d}"
            last = d == len(levels) - 1
            p = _stage_params(gates, n_prev, tag)
            if last:
                # logit 2f - 1: positive exactly when the output bit is 1
                p[f"{tag}.W"] = 2 * p[f"{tag}.W"]
                p[f"{tag}.b"] = 2 * p[f"{tag}.b"] - 1
            params.update(p)
            stages.append((f"{tag}.relu", 3 * len(gates), _relu_stage(tag)))
            stages.append((f"{tag}.gates", len(gates), _affine_stage(tag)))
            if not last:
                for g, name in enumerate(names[d]):
                    sites[f"S_{name}"] = Site(f"{tag}.gates", g, g + 1)
            n_prev = len(gates)
        self.net = LayeredNetwork(
            params, n_inputs, stages, sites,
            lambda settings: [[float(s[x]) for x in inputs] for s in settings])
        self.pi = {name: f"S_{name}" for level in names[:-1] for name in level}
        self.inputs = inputs

    @staticmethod
    def kappa(y: float) -> bool:
        return bool(y > 0)

    def predict(self, output):
        return [self.kappa(y) for y in output.value[:, 0]]

    def loss(self, output, labels, weights=None):
        return ad.logistic_loss(output, [float(v) for v in labels], weights)

    def all_inputs(self) -> list[dict]:
        return [dict(zip(self.inputs, bits)) for bits in itertools.product(BOOL, repeat=len(self.inputs))]
