"""Behavioral accuracy, exact match and interchange intervention accuracy."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from iit.autodiff import Tape
from iit.errors import EmptyDataset
from iit.objectives import StepContext, iit_label, typed_label
from iit.scm import enumerate_inputs

CHUNK = 2048


@dataclass(frozen=True)
class Sampled:
    """Ordered pairs drawn uniformly with replacement (self-pairs possible)."""

    n: int
    seed: int = 0


EXHAUSTIVE = "exhaustive"


def parse_pairs(text: str):
    """``"exhaustive"`` or ``"sampled:N"`` (optionally ``"sampled:N:SEED"``)."""
    if text == EXHAUSTIVE:
        return EXHAUSTIVE
    parts = text.split(":")
    if parts[0] == "sampled" and len(parts) in (2, 3):
        n = int(parts[1])
        if n <= 0:
            raise ValueError("sample count must be positive")
        return Sampled(n, int(parts[2]) if len(parts) == 3 else 0)
    raise ValueError(f"bad pair mode {text!r}")


def thread_count() -> int:
    raw = os.environ.get("ARTIFACT_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _chunks(n: int, size: int | None = None) -> list[tuple[int, int]]:
    size = size or CHUNK
    return [(i, min(n, i + size)) for i in range(0, n, size)]


def _map_chunks(fn, n: int) -> list:
    """Apply ``fn(lo, hi)`` over chunks; results come back in chunk order."""
    spans = _chunks(n)
    workers = min(thread_count(), len(spans))
    if workers <= 1:
        return [fn(lo, hi) for lo, hi in spans]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda span: fn(*span), spans))


def _inputs(task, dataset):
    if dataset is None:
        return enumerate_inputs(task.causal)
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("evaluation set is empty")
    return dataset


def _pairs(items: Sequence, pairs, salt: int = 0) -> tuple[list, np.ndarray]:
    """``(items, idx)`` where row ``(i, j)`` of ``idx`` pairs base ``items[i]`` with source ``items[j]``."""
    if pairs == EXHAUSTIVE:
        n = len(items)
        return list(items), np.stack(np.divmod(np.arange(n * n), n), axis=1)
    if isinstance(pairs, Sampled):
        rng = np.random.default_rng([pairs.seed, salt])
        return list(items), rng.integers(0, len(items), size=(pairs.n, 2))
    flat = [x for pair in pairs for x in pair]
    return flat, np.arange(len(flat)).reshape(-1, 2)


def predictions(task, dataset: Sequence[Mapping]) -> list:
    def run(lo, hi):
        ctx = StepContext(task, Tape(grad=False), dataset[lo:hi], teacher=False)
        return task.predict(ctx.base_out)
    return [p for chunk in _map_chunks(run, len(dataset)) for p in chunk]


def behavioral_accuracy(task, dataset: Sequence[Mapping] | None = None) -> float:
    """Fraction of inputs where kappa(network output) equals the causal output."""
    items = _inputs(task, dataset)
    preds = predictions(task, items)
    return sum(p == task.label(x) for p, x in zip(preds, items)) / len(items)


def exact_match(task, dataset: Sequence[Mapping]) -> float:
    """Behavioral accuracy for sequence outputs: a decoded sequence counts only if every token matches."""
    if not list(dataset):
        raise EmptyDataset("evaluation set is empty")
    return behavioral_accuracy(task, dataset)


@dataclass
class Estimate:
    value: float
    hits: int
    count: int
    # pairs whose counterfactual label is undefined (skipped)
    skipped: int = 0


def _interchange_hits(task, items: list, idx: np.ndarray, site_from: str, site_to: str,
                      label_fn) -> Estimate:
    # labels are computed once per distinct index pair; small input spaces repeat a lot
    codes = idx[:, 0] * len(items) + idx[:, 1]
    uniq, inverse = np.unique(codes, return_inverse=True)
    table = [label_fn(items[c // len(items)], items[c % len(items)]) for c in uniq.tolist()]
    inverse = inverse.ravel().tolist()

    def run(lo, hi):
        labels = [table[u] for u in inverse[lo:hi]]
        rows = [r for r, lab in enumerate(labels, lo) if task.valid_label(lab)]
        if not rows:
            return 0, 0, hi - lo
        ctx = StepContext(task, Tape(grad=False), [items[i] for i in idx[rows, 0].tolist()],
                          [items[j] for j in idx[rows, 1].tolist()], teacher=False)
        kept = [labels[r - lo] for r in rows]
        out = ctx.intervened(list(range(len(rows))), site_from, site_to, kept)
        hits = sum(p == y for p, y in zip(task.predict(out), kept))
        return hits, len(rows), hi - lo - len(rows)

    parts = _map_chunks(run, len(idx))
    hits = sum(p[0] for p in parts)
    count = sum(p[1] for p in parts)
    skipped = sum(p[2] for p in parts)
    return Estimate(hits / count if count else 0.0, hits, count, skipped)


def int_inv_acc(task, var: str, pairs=EXHAUSTIVE,
                dataset: Sequence[Mapping] | None = None) -> Estimate:
    """IntInvAcc for one aligned variable.

    ``pairs`` is ``"exhaustive"`` (every ordered pair of ``dataset``, or of
    all inputs when ``dataset`` is None), ``Sampled(n, seed)``, or an
    explicit list of ``(base, source)`` pairs.
    """
    items = _inputs(task, dataset) if not isinstance(pairs, (list, tuple)) else ()
    items, idx = _pairs(items, pairs, task.variables.index(var))
    site = task.pi[var]
    return _interchange_hits(task, items, idx, site, site,
                             lambda b, s: iit_label(task, var, b, s))


def typed_int_inv_acc(task, var_pairs: Sequence[tuple[str, str]], pairs=EXHAUSTIVE,
                      dataset: Sequence[Mapping] | None = None) -> dict[tuple[str, str], Estimate]:
    """Typed IntInvAcc for each ordered (from, to) variable pair."""
    items = _inputs(task, dataset)
    out = {}
    for k, (a, b) in enumerate(var_pairs):
        flat, idx = _pairs(items, pairs, 1000 + k)
        out[(a, b)] = _interchange_hits(
            task, flat, idx, task.pi[a], task.pi[b],
            lambda base, src, a=a, b=b: typed_label(task, a, b, base, src))
    return out


def pooled(estimates) -> float:
    hits = sum(e.hits for e in estimates)
    count = sum(e.count for e in estimates)
    return hits / count if count else 0.0


@dataclass
class MetricsReport:
    behavioral_accuracy: float
    int_inv_accuracy: dict[str, float]
    pair_count: int
    seed: int | None
    pairs: str = EXHAUSTIVE
    typed_int_inv_accuracy: float | None = None
    exact_match: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def mean_int_inv_accuracy(self) -> float:
        vals = list(self.int_inv_accuracy.values())
        return sum(vals) / len(vals) if vals else 0.0

    def as_dict(self) -> dict:
        out: dict[str, Any] = {"behavioral_accuracy": self.behavioral_accuracy}
        for var in sorted(self.int_inv_accuracy):
            out[f"int_inv_accuracy.{var}"] = self.int_inv_accuracy[var]
        out["typed_int_inv_accuracy"] = self.typed_int_inv_accuracy
        out["exact_match"] = self.exact_match
        out["pair_count"] = self.pair_count
        out["pairs"] = self.pairs
        out["seed"] = self.seed
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        known = {"behavioral_accuracy", "typed_int_inv_accuracy", "exact_match",
                 "pair_count", "pairs", "seed"}
        iia = {k.split(".", 1)[1]: v for k, v in data.items()
               if k.startswith("int_inv_accuracy.")}
        extra = {k: v for k, v in data.items()
                 if k not in known and not k.startswith("int_inv_accuracy.")}
        return cls(data["behavioral_accuracy"], iia, data["pair_count"], data["seed"],
                   data.get("pairs", EXHAUSTIVE), data.get("typed_int_inv_accuracy"),
                   data.get("exact_match"), extra)


def evaluate(task, dataset: Sequence[Mapping] | None = None, pairs=EXHAUSTIVE,
             variables: Sequence[str] | None = None, typed: bool = False,
             sequence: bool = False) -> MetricsReport:
    """Full metrics block for one evaluation set."""
    items = _inputs(task, dataset)
    variables = list(variables or task.variables)
    estimates = {v: int_inv_acc(task, v, pairs, items) for v in variables}
    behavior = behavioral_accuracy(task, items)
    typed_acc = None
    if typed and task.typed_pairs:
        typed_acc = pooled(typed_int_inv_acc(task, task.typed_pairs, pairs, items).values())
    seed = pairs.seed if isinstance(pairs, Sampled) else None
    mode = pairs if isinstance(pairs, str) else f"sampled:{pairs.n}"
    return MetricsReport(
        behavior, {v: e.value for v, e in estimates.items()},
        sum(e.count for e in estimates.values()), seed, mode, typed_acc,
        behavior if sequence else None)
