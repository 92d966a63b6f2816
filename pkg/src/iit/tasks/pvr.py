"""Symbolic pointer-value retrieval.

Inputs are four digit encodings (one-hot 10-vectors, optionally with small
label-preserving noise) for the top-left, top-right, bottom-left and
bottom-right quadrants. The top-left digit is a pointer selecting which of
the other three digits is the output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from iit import autodiff as ad
from iit.errors import DomainError
from iit.network import LayeredNetwork, Site
from iit.scm import OPAQUE, build_model
from iit.tasks.base import Task

QUADRANTS = ("TL", "TR", "BL", "BR")
DIGITS = tuple(range(10))
INPUTS = tuple(f"I_{q}" for q in QUADRANTS)
LABELS = tuple(f"Y_{q}" for q in QUADRANTS)

# digits removed from training at each quadrant by the systematic split
HELD_OUT = {"TR": frozenset({1, 2, 3}), "BL": frozenset({4, 5, 6}),
            "BR": frozenset({0, 7, 8, 9})}


def pvr_output(y_tl: int, y_tr: int, y_bl: int, y_br: int) -> int:
    for d in (y_tl, y_tr, y_bl, y_br):
        if d not in DIGITS:
            raise DomainError(f"digit {d!r} outside 0..9")
    if y_tl <= 3:
        return y_tr
    if y_tl <= 6:
        return y_bl
    return y_br


def digit_oracle(image: Sequence[float]) -> int:
    """Stand-in for the image classifier: the argmax of the encoding."""
    return max(range(len(image)), key=image.__getitem__)


def pvr_model():
    variables = list(INPUTS) + list(LABELS) + ["O"]
    parents = {y: [i] for i, y in zip(INPUTS, LABELS)}
    parents["O"] = list(LABELS)
    spaces = {i: OPAQUE for i in INPUTS}
    spaces.update({v: DIGITS for v in LABELS + ("O",)})
    equations = {y: digit_oracle for y in LABELS}
    equations["O"] = pvr_output
    return build_model(variables, parents, spaces, equations)


def encode_digit(d: int, rng: np.random.Generator | None = None, noise: float = 0.0) -> tuple:
    v = np.zeros(10)
    v[d] = 1.0
    if rng is not None and noise > 0:
        # uniform in [0, noise) with noise < 1 never moves the argmax
        v += rng.uniform(0.0, noise, size=10)
    return tuple(float(x) for x in v)


def make_setting(labels: Sequence[int], rng=None, noise: float = 0.0) -> dict:
    return {i: encode_digit(int(d), rng, noise) for i, d in zip(INPUTS, labels)}


def labels_of(setting: Mapping) -> tuple[int, ...]:
    return tuple(digit_oracle(setting[i]) for i in INPUTS)


def _encode(settings):
    return [[x for i in INPUTS for x in s[i]] for s in settings]


@dataclass(frozen=True)
class SplitSpec:
    """Train-exclusion rule; ``enabled=False`` keeps every configuration."""

    name: str = "systematic"
    enabled: bool = True

    def excluded(self, labels: Sequence[int]) -> bool:
        if not self.enabled:
            return False
        _, tr, bl, br = labels
        return tr in HELD_OUT["TR"] or bl in HELD_OUT["BL"] or br in HELD_OUT["BR"]

    def in_training(self, labels: Sequence[int]) -> bool:
        return not self.excluded(labels)


def gen_pvr_dataset(n: int, split: SplitSpec = SplitSpec(), noise: float = 0.0,
                    seed: int = 0, n_eval: int | None = None,
                    n_zero_shot: int | None = None,
                    n_test: int | None = None) -> dict[str, list[dict]]:
    """Train / dev / test sets from the training distribution plus a zero-shot set.

    Dev and test get ``n_eval`` examples each (default ``n // 10``) unless
    ``n_test`` is given. The
    zero-shot set (``n_zero_shot``, default ``n_eval``) holds only
    configurations excluded by ``split``; it is empty when the split is
    disabled.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    n_eval = max(1, n // 10) if n_eval is None else n_eval
    n_zero_shot = n_eval if n_zero_shot is None else n_zero_shot
    rng = np.random.default_rng(seed)

    def draw(count, keep):
        out = []
        while len(out) < count:
            labels = tuple(int(d) for d in rng.integers(0, 10, size=4))
            if keep(labels):
                out.append(make_setting(labels, rng, noise))
        return out

    sets = {
        "train": draw(n, split.in_training),
        "dev": draw(n_eval, split.in_training),
        "test": draw(n_eval if n_test is None else n_test, split.in_training),
    }
    sets["zero_shot"] = draw(n_zero_shot, split.excluded) if split.enabled else []
    return sets


def pvr_network(rng: np.random.Generator, block: int = 16, hidden: int = 64,
                shared_encoder: bool = True) -> LayeredNetwork:
    """Quadrant encoder -> four aligned blocks -> hidden layer -> 10 logits.

    With ``shared_encoder`` every quadrant is encoded by the same weights, the
    MLP analogue of a convolution's weight sharing. Block ``q`` only sees
    quadrant ``q`` either way.
    """
    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    params = {}
    if shared_encoder:
        params["enc.W"] = glorot(10, block)
        params["enc.b"] = np.zeros((1, block))
    else:
        for q in QUADRANTS:
            params[f"enc.{q}.W"] = glorot(10, block)
            params[f"enc.{q}.b"] = np.zeros((1, block))
    params["hid.W"] = glorot(4 * block, hidden)
    params["hid.b"] = np.zeros((1, hidden))
    params["out.W"] = glorot(hidden, 10)
    params["out.b"] = np.zeros((1, 10))

    def quadrants(p, x):
        n = x.shape[0]
        if shared_encoder:
            z = ad.reshape(x, (4 * n, 10)) @ p["enc.W"] + ad.broadcast_rows(p["enc.b"], 4 * n)
            return ad.reshape(ad.relu(z), (n, 4 * block))
        parts = []
        for k, q in enumerate(QUADRANTS):
            xq = ad.slice_cols(x, 10 * k, 10 * k + 10)
            parts.append(ad.relu(xq @ p[f"enc.{q}.W"] + ad.broadcast_rows(p[f"enc.{q}.b"], n)))
        return ad.concat(parts)

    def hidden_layer(p, q):
        return ad.relu(q @ p["hid.W"] + ad.broadcast_rows(p["hid.b"], q.shape[0]))

    def logits(p, h):
        return h @ p["out.W"] + ad.broadcast_rows(p["out.b"], h.shape[0])

    sites = {f"Q_{q}": Site("quadrants", k * block, (k + 1) * block)
             for k, q in enumerate(QUADRANTS)}
    sites.update({f"X_{q}": Site("input", 10 * k, 10 * k + 10) for k, q in enumerate(QUADRANTS)})
    return LayeredNetwork(
        params, 40,
        [("quadrants", 4 * block, quadrants), ("hidden", hidden, hidden_layer),
         ("logits", 10, logits)],
        sites, _encode)


class PvrTask(Task):
    name = "pvr"
    output_var = "O"
    typed_groups = (LABELS,)

    def __init__(self, seed: int = 0, block: int = 16, hidden: int = 64,
                 shared_encoder: bool = True, site_prefix: str = "Q"):
        self.causal = pvr_model()
        self.net = pvr_network(np.random.default_rng(seed), block, hidden, shared_encoder)
        self.pi = {y: f"{site_prefix}_{q}" for y, q in zip(LABELS, QUADRANTS)}

    def key(self, setting):
        # the causal model only sees inputs through the digit oracle
        return labels_of(setting)

    def predict(self, output):
        return [int(k) for k in output.value.argmax(axis=1)]

    def loss(self, output, labels, weights=None):
        return ad.softmax_cross_entropy(output, list(labels), weights)

    def augment(self, base, source, rng):
        """Swap a random quadrant of ``base`` with a random quadrant of ``source``."""
        to_q, from_q = rng.integers(0, 4, size=2)
        return swap_quadrant(base, source, QUADRANTS[to_q], QUADRANTS[from_q])


def swap_quadrant(base: Mapping, source: Mapping, to_q: str, from_q: str) -> dict:
    out = dict(base)
    out[f"I_{to_q}"] = source[f"I_{from_q}"]
    return out
