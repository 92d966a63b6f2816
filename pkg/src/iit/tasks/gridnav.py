"""Mini grid-world navigation: "walk to the [size] [color] shape" commands.

Coordinates are ``(row, col)`` with row 0 at the top; north is decreasing
row. The agent always starts facing east. Sizes are ranks 1 (smaller) and
2 (bigger); "small" and "big" are relative among the objects that match the
rest of the command.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from iit import autodiff as ad
from iit.errors import AmbiguousTarget, NoTarget, ParseError
from iit.network import Network, Site
from iit.scm import OPAQUE, build_model
from iit.tasks.base import Task

GRID = 6
SIZES = ("small", "big")
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "cylinder")
ACTIONS = ("walk", "turn_left", "turn_right", "eos")
HEADINGS = ("east", "north", "west", "south")
STEP = {"east": (0, 1), "north": (-1, 0), "west": (0, -1), "south": (1, 0)}
DELTAS = tuple(range(-(GRID - 1), GRID))

PREFIX = ("walk", "to", "the")
PAD = "<pad>"
COMMAND_VOCAB = (PAD,) + PREFIX + SIZES + COLORS + SHAPES
COMMAND_LEN = len(PREFIX) + 3
MAX_STEPS = 2 * (GRID - 1) + 3
SOS = len(ACTIONS)
FEATURES = 1 + 2 + len(COLORS) + len(SHAPES)


@dataclass(frozen=True, order=True)
class Obj:
    row: int
    col: int
    size: int
    color: str
    shape: str


@dataclass(frozen=True)
class World:
    n: int
    objects: tuple[Obj, ...]
    agent: tuple[int, int]
    heading: str = "east"

    def to_json(self) -> dict:
        return {"n": self.n,
                "objects": [{"row": o.row, "col": o.col, "size": o.size,
                             "color": o.color, "shape": o.shape} for o in self.objects],
                "agent": {"row": self.agent[0], "col": self.agent[1], "heading": self.heading}}

    @classmethod
    def from_json(cls, data: Mapping) -> "World":
        objs = tuple(Obj(o["row"], o["col"], o["size"], o["color"], o["shape"])
                     for o in data["objects"])
        a = data["agent"]
        return cls(data["n"], objs, (a["row"], a["col"]), a.get("heading", "east"))


# -- oracle solver ------------------------------------------------------------

def parse_command(text: str) -> tuple[str | None, str | None, str]:
    """Extract ``(size, color, shape)``; size and color may be None."""
    tokens = text.split()
    for i, word in enumerate(PREFIX):
        if i >= len(tokens) or tokens[i] != word:
            raise ParseError(f"expected {word!r}", i)
    rest = tokens[len(PREFIX):]
    size = color = None
    pos = len(PREFIX)
    if rest and rest[0] in SIZES:
        size, rest, pos = rest[0], rest[1:], pos + 1
    if rest and rest[0] in COLORS:
        color, rest, pos = rest[0], rest[1:], pos + 1
    if not rest:
        raise ParseError("missing shape", pos)
    if rest[0] not in SHAPES:
        raise ParseError(f"unexpected token {rest[0]!r}", pos)
    if len(rest) > 1:
        raise ParseError(f"trailing token {rest[1]!r}", pos + 1)
    return size, color, rest[0]


def format_command(size: str | None, color: str | None, shape: str) -> str:
    return " ".join(PREFIX + tuple(w for w in (size, color, shape) if w is not None))


def candidates(world: World, color: str | None, shape: str) -> list[Obj]:
    return [o for o in world.objects
            if o.shape == shape and (color is None or o.color == color)]


def resolve_target(world: World, size: str | None, color: str | None,
                   shape: str) -> tuple[int, int]:
    """Position of the unique object matching the command."""
    found = candidates(world, color, shape)
    if not found:
        raise NoTarget(format_command(size, color, shape))
    if size is not None:
        extreme = min if size == "small" else max
        rank = extreme(o.size for o in found)
        found = [o for o in found if o.size == rank]
    if len(found) > 1:
        raise AmbiguousTarget(format_command(size, color, shape))
    return found[0].row, found[0].col


def position_deltas(p_t: tuple[int, int], p_a: tuple[int, int]) -> tuple[int, int]:
    """``(dx, dy)``: column difference and row difference, target minus agent."""
    return p_t[1] - p_a[1], p_t[0] - p_a[0]


def _turns(heading: str, goal: str) -> list[str]:
    k = (HEADINGS.index(goal) - HEADINGS.index(heading)) % 4
    return {0: [], 1: ["turn_left"], 2: ["turn_left", "turn_left"], 3: ["turn_right"]}[k]


def emit_actions(dx: int, dy: int) -> tuple[str, ...]:
    """Vertical leg first, then horizontal, with the fewest turns; ends with eos."""
    out: list[str] = []
    heading = "east"
    for goal, dist in ((("south" if dy > 0 else "north"), abs(dy)),
                       (("east" if dx > 0 else "west"), abs(dx))):
        if dist:
            out += _turns(heading, goal)
            out += ["walk"] * dist
            heading = goal
    out.append("eos")
    return tuple(out)


@dataclass(frozen=True)
class Pose:
    row: int
    col: int
    heading: str
    off_grid: int = 0


def simulate(world: World, actions: Iterable[str]) -> Pose:
    """Replay actions from the agent's start; walks off the grid are clamped and counted."""
    row, col = world.agent
    heading = world.heading
    off = 0
    for a in actions:
        if a == "eos":
            break
        if a == "turn_left":
            heading = HEADINGS[(HEADINGS.index(heading) + 1) % 4]
        elif a == "turn_right":
            heading = HEADINGS[(HEADINGS.index(heading) - 1) % 4]
        elif a == "walk":
            dr, dc = STEP[heading]
            r, c = row + dr, col + dc
            if 0 <= r < world.n and 0 <= c < world.n:
                row, col = r, c
            else:
                off += 1
        else:
            raise ValueError(f"unknown action {a!r}")
    return Pose(row, col, heading, off)


# -- causal model -------------------------------------------------------------

def _maybe_target(size, color, shape, world):
    try:
        return resolve_target(world, size, color, shape)
    except (NoTarget, AmbiguousTarget):
        # a counterfactual command can fail to pick out an object
        return None


def _delta(index):
    def f(p_t, p_a):
        return None if p_t is None else position_deltas(p_t, p_a)[index]
    return f


def _output(dx, dy):
    return None if dx is None or dy is None else emit_actions(dx, dy)


def gridnav_model(n: int = GRID):
    cells = tuple((r, c) for r in range(n) for c in range(n))
    deltas = tuple(range(-(n - 1), n))
    variables = ["I_Com", "I_World", "T_Size", "T_Color", "T_Shape", "P_t", "P_a",
                 "P_dx", "P_dy", "O"]
    parents = {"T_Size": ["I_Com"], "T_Color": ["I_Com"], "T_Shape": ["I_Com"],
               "P_t": ["T_Size", "T_Color", "T_Shape", "I_World"], "P_a": ["I_World"],
               "P_dx": ["P_t", "P_a"], "P_dy": ["P_t", "P_a"], "O": ["P_dx", "P_dy"]}
    spaces = {"I_Com": OPAQUE, "I_World": OPAQUE, "T_Size": (None,) + SIZES,
              "T_Color": (None,) + COLORS, "T_Shape": SHAPES, "P_t": (None,) + cells,
              "P_a": cells, "P_dx": (None,) + deltas, "P_dy": (None,) + deltas, "O": OPAQUE}
    equations = {
        "T_Size": lambda com: parse_command(com)[0],
        "T_Color": lambda com: parse_command(com)[1],
        "T_Shape": lambda com: parse_command(com)[2],
        "P_t": _maybe_target,
        "P_a": lambda world: world.agent,
        "P_dx": _delta(0),
        "P_dy": _delta(1),
        "O": _output,
    }
    return build_model(variables, parents, spaces, equations)


# -- data ---------------------------------------------------------------------

SPLITS = ("novel_color", "novel_size", "novel_direction", "disabled")


def held_out(kind: str, command: str, world: World) -> bool:
    """True when an example belongs to the zero-shot pattern of ``kind``."""
    size, color, shape = parse_command(command)
    if kind == "novel_color":
        return color == "yellow" and shape == "square"
    if kind == "novel_size":
        return size == "small" and shape == "cylinder"
    if kind == "novel_direction":
        dx, dy = position_deltas(resolve_target(world, size, color, shape), world.agent)
        return dx < 0 and dy > 0
    if kind == "disabled":
        return False
    raise ValueError(f"unknown split {kind!r}")


def random_example(rng: np.random.Generator, n: int = GRID, n_objects: int = 5) -> dict:
    """A (command, world) setting with a unique referent."""
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))] if rng.random() < 0.5 else None
    size = SIZES[rng.integers(2)] if rng.random() < 0.5 else None
    cells = rng.permutation(n * n)
    spots = [(int(c) // n, int(c) % n) for c in cells[:n_objects + 1]]
    agent = spots.pop()

    t_color = color or COLORS[rng.integers(len(COLORS))]
    t_size = {None: int(rng.integers(1, 3)), "small": 1, "big": 2}[size]
    objs = [Obj(*spots.pop(), t_size, t_color, shape)]
    if size is not None:
        # a foil of the other size among the matching objects makes size meaningful
        f_color = color or COLORS[rng.integers(len(COLORS))]
        objs.append(Obj(*spots.pop(), 3 - t_size, f_color, shape))
    while spots:
        o_shape = SHAPES[rng.integers(len(SHAPES))]
        o_color = COLORS[rng.integers(len(COLORS))]
        if o_shape == shape and (color is None or o_color == color):
            continue
        objs.append(Obj(*spots.pop(), int(rng.integers(1, 3)), o_color, o_shape))
    world = World(n, tuple(sorted(objs)), agent)
    return {"I_Com": format_command(size, color, shape), "I_World": world}


def gen_gridnav_splits(kind: str, counts: Mapping[str, int], seed: int = 0,
                       n: int = GRID) -> dict[str, list[dict]]:
    """train/dev/test from the training distribution; zero_shot only from the held-out pattern."""
    if kind not in SPLITS:
        raise ValueError(f"unknown split {kind!r}")
    for name, c in counts.items():
        if c < 0 or (name != "zero_shot" and c <= 0):
            raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    out = {}
    for name in ("train", "dev", "test", "zero_shot"):
        want = counts.get(name, 0)
        if name == "zero_shot" and kind == "disabled":
            out[name] = []
            continue
        keep_held = name == "zero_shot"
        items: list[dict] = []
        while len(items) < want:
            ex = random_example(rng, n)
            if held_out(kind, ex["I_Com"], ex["I_World"]) == keep_held:
                items.append(ex)
        out[name] = items
    return out


def example_actions(ex: Mapping) -> tuple[str, ...]:
    size, color, shape = parse_command(ex["I_Com"])
    world = ex["I_World"]
    dx, dy = position_deltas(resolve_target(world, size, color, shape), world.agent)
    return emit_actions(dx, dy)


# -- network ------------------------------------------------------------------

def _cell_features(world: World) -> np.ndarray:
    f = np.zeros((world.n * world.n, FEATURES))
    for o in world.objects:
        i = o.row * world.n + o.col
        f[i, 0] = 1.0
        f[i, o.size] = 1.0
        f[i, 3 + COLORS.index(o.color)] = 1.0
        f[i, 3 + len(COLORS) + SHAPES.index(o.shape)] = 1.0
    return f


def _tokens(command: str) -> list[int]:
    ids = [COMMAND_VOCAB.index(t) for t in command.split()]
    return [0] * (COMMAND_LEN - len(ids)) + ids


class GridNavNetwork(Network):
    """Recurrent command encoder, attention over grid cells, recurrent action decoder.

    Layers: ``e_shape`` (encoder state after the shape token, split in thirds),
    ``h0`` (decoder initial state, first half for row offset, second half for
    column offset) and ``output`` (per-step action logits, time-major).
    """

    def __init__(self, rng: np.random.Generator, k: int = 8, m: int = 16, emb: int = 16,
                 att: int = 32, pos: int = 64, n: int = GRID):
        def init(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        e, h = 3 * k, 2 * m
        params = {
            "enc.E": rng.normal(0, 0.5, size=(len(COMMAND_VOCAB), emb)),
            "enc.Wx": init(emb, e), "enc.Wh": init(e, e), "enc.b": np.zeros((1, e)),
            "att.Wc": init(FEATURES, att), "att.We": init(e, att), "att.b": np.zeros((1, att)),
            "att.v": init(att, 1),
            "pos.W1": init(4, pos), "pos.b1": np.zeros((1, pos)),
            "pos.W2": init(pos, h), "pos.b2": np.zeros((1, h)),
            "dec.E": rng.normal(0, 0.5, size=(len(ACTIONS) + 1, emb)),
            "dec.Wx": init(emb, h), "dec.Wh": init(h, h), "dec.Wc": init(h, h),
            "dec.b": np.zeros((1, h)), "dec.Wo": init(h, len(ACTIONS)),
            "dec.bo": np.zeros((1, len(ACTIONS))),
        }
        layers = {"e_shape": e, "h0": h, "output": len(ACTIONS)}
        sites = {"E_size": Site("e_shape", 0, k), "E_color": Site("e_shape", k, 2 * k),
                 "E_shape": Site("e_shape", 2 * k, 3 * k),
                 "H_row": Site("h0", 0, m), "H_col": Site("h0", m, h)}
        super().__init__(params, layers, sites)
        self.n = n
        self.coords = np.array([(r, c) for r in range(n) for c in range(n)], dtype=float)

    def encode(self, settings):
        settings = list(settings)
        return {
            "tokens": np.array([_tokens(s["I_Com"]) for s in settings], dtype=np.intp),
            "cells": np.stack([_cell_features(s["I_World"]) for s in settings])
            if settings else np.zeros((0, self.n * self.n, FEATURES)),
            "agent": np.array([s["I_World"].agent for s in settings], dtype=float).reshape(-1, 2),
        }

    def select(self, batch, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return {k: v[rows] for k, v in batch.items()}

    def _encoder(self, tape, p, tokens):
        n = tokens.shape[0]
        h = tape.const(np.zeros((n, self.layers["e_shape"])))
        for t in range(tokens.shape[1]):
            x = ad.embedding_lookup(p["enc.E"], tokens[:, t])
            h = ad.tanh(x @ p["enc.Wx"] + h @ p["enc.Wh"] + ad.broadcast_rows(p["enc.b"], n))
        return h

    def _h0(self, tape, p, e, batch):
        n = e.shape[0]
        cells = self.n * self.n
        feats = tape.const(batch["cells"].reshape(n * cells, FEATURES))
        z = feats @ p["att.Wc"] + ad.repeat_rows(e @ p["att.We"], cells) \
            + ad.broadcast_rows(p["att.b"], n * cells)
        scores = ad.reshape(ad.relu(z) @ p["att.v"], (n, cells))
        alpha = ad.softmax(scores)
        target = alpha @ tape.const(self.coords)
        where = ad.concat([target, tape.const(batch["agent"])])
        hid = ad.relu(where @ p["pos.W1"] + ad.broadcast_rows(p["pos.b1"], n))
        return ad.tanh(hid @ p["pos.W2"] + ad.broadcast_rows(p["pos.b2"], n))

    def _decoder(self, tape, p, h0, targets):
        n = h0.shape[0]
        ctx = h0 @ p["dec.Wc"] + ad.broadcast_rows(p["dec.b"], n)
        h = h0
        prev = np.full(n, SOS, dtype=np.intp)
        steps = []
        for t in range(MAX_STEPS):
            x = ad.embedding_lookup(p["dec.E"], prev)
            h = ad.tanh(x @ p["dec.Wx"] + h @ p["dec.Wh"] + ctx)
            logits = h @ p["dec.Wo"] + ad.broadcast_rows(p["dec.bo"], n)
            steps.append(logits)
            prev = targets[0][:, t] if targets is not None else logits.value.argmax(axis=1)
        return ad.concat(steps, axis=0)

    def run(self, tape, batch, patch=None, targets=None, reuse=None, stop_at=None):
        p = self.bind(tape)
        acts: dict = {}
        resume = None
        if reuse and patch:
            first = min(("e_shape", "h0").index(name) for name in patch)
            resume = ("e_shape", "h0")[first]
            resume = resume if resume in reuse else None
        if resume == "h0":
            h0 = reuse["h0"]
        else:
            e = reuse["e_shape"] if resume else self._encoder(tape, p, batch["tokens"])
            e = self.tap(acts, patch, "e_shape", e)
            if stop_at == "e_shape":
                return None, acts
            h0 = self._h0(tape, p, e, batch)
        h0 = self.tap(acts, patch, "h0", h0)
        if stop_at == "h0":
            return None, acts
        out = self._decoder(tape, p, h0, targets)
        acts["output"] = out
        return out, acts


class GridNavTask(Task):
    name = "gridnav"
    output_var = "O"
    typed_groups = (("P_dy", "P_dx"),)

    def __init__(self, seed: int = 0, k: int = 8, m: int = 16, n: int = GRID, **sizes):
        self.causal = gridnav_model(n)
        self.net = GridNavNetwork(np.random.default_rng(seed), k=k, m=m, n=n, **sizes)
        self.pi = {"T_Size": "E_size", "T_Color": "E_color", "T_Shape": "E_shape",
                   "P_dy": "H_row", "P_dx": "H_col"}

    def key(self, setting):
        return setting["I_Com"], setting["I_World"]

    def probe_space(self, var):
        if var in ("P_dx", "P_dy"):
            return DELTAS
        return super().probe_space(var)

    def targets(self, labels):
        ids = np.full((len(labels), MAX_STEPS), ACTIONS.index("eos"), dtype=np.intp)
        lengths = np.zeros(len(labels), dtype=np.intp)
        for i, seq in enumerate(labels):
            ids[i, :len(seq)] = [ACTIONS.index(a) for a in seq]
            lengths[i] = len(seq)
        return ids, lengths

    def predict(self, output):
        ids = output.value.argmax(axis=1).reshape(MAX_STEPS, -1).T
        eos = ACTIONS.index("eos")
        out = []
        for row in ids:
            seq = []
            for a in row:
                seq.append(ACTIONS[a])
                if a == eos:
                    break
            out.append(tuple(seq))
        return out

    def loss(self, output, labels, weights=None):
        """Mean over rows of the per-sequence mean token cross-entropy."""
        ids, lengths = self.targets(labels)
        n = len(labels)
        w_row = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
        mask = np.arange(MAX_STEPS)[:, None] < lengths[None, :]
        w = (mask * (w_row / lengths)[None, :]).reshape(-1)
        return ad.softmax_cross_entropy(output, ids.T.reshape(-1), w)


# -- serialization ------------------------------------------------------------

def to_record(ex: Mapping) -> dict:
    return {"command": ex["I_Com"], "world": ex["I_World"].to_json(),
            "actions": list(example_actions(ex))}


def from_record(rec: Mapping) -> dict:
    return {"I_Com": rec["command"], "I_World": World.from_json(rec["world"])}
