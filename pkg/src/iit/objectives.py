"""Training objectives, pair sampling and the interchange intervention training loop."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from iit import autodiff as ad
from iit.autodiff import Tape, ValueRef
from iit.errors import DivergenceError, EmptyDataset, TypeMismatch
from iit.network import as_batch
from iit.scm import interchange, typed_interchange

log = logging.getLogger(__name__)

OBJECTIVES = ("standard", "iit", "typed_iit", "multitask", "augment")
PAIR_MODES = ("exhaustive", "uniform", "balanced")


@dataclass
class ObjectiveConfig:
    weights: dict[str, float] = field(default_factory=lambda: {"standard": 1.0})
    lr: float = 0.01
    optimizer: str = "sgd"
    epochs: int = 1
    seed: int = 0
    batch_size: int = 32
    pair_mode: str = "uniform"
    impactful_fraction: float = 0.5
    # aligned variables used by the IIT and multi-task objectives (None = all)
    variables: Sequence[str] | None = None
    lr_decay: float = 1.0
    lr_decay_every: int = 0

    def __post_init__(self):
        unknown = set(self.weights) - set(OBJECTIVES)
        if unknown:
            raise ValueError(f"unknown objectives {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("objective weights must be non-negative")
        if not any(w > 0 for w in self.weights.values()):
            raise ValueError("at least one objective weight must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"unknown pair mode {self.pair_mode!r}")
        if not 0.0 <= self.impactful_fraction <= 1.0:
            raise ValueError("impactful_fraction must lie in [0, 1]")

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, 0.0))


@dataclass(frozen=True)
class TrainingPair:
    base: Mapping
    source: Mapping
    variable: str
    typed: tuple[str, str] | None = None


# -- optimizers ---------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: Mapping, scale: float = 1.0) -> None:
        for k, g in grads.items():
            params[k] = params[k] - (self.lr * scale) * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: Mapping, scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - (self.lr * scale) * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: ObjectiveConfig):
    return SGD(config.lr) if config.optimizer == "sgd" else Adam(config.lr)


# -- labels -------------------------------------------------------------------

def iit_label(task, var: str, base: Mapping, source: Mapping) -> Any:
    """Causal interchange label on the submodel marginalized to ``var``."""
    return task.memo(("iit", var, task.key(base), task.key(source)), lambda: interchange(
        task.marginal(var), base, source, (var,))[task.output_var])


def typed_label(task, var_from: str, var_to: str, base: Mapping, source: Mapping) -> Any:
    return task.memo(("typed", var_from, var_to, task.key(base), task.key(source)),
                     lambda: typed_interchange(task.causal, base, source,
                                               var_from, var_to)[task.output_var])


def is_impactful(task, pair: TrainingPair) -> bool:
    return iit_label(task, pair.variable, pair.base, pair.source) != task.label(pair.base)


# -- pair sampling ------------------------------------------------------------

def pair_sampler(dataset: Sequence[Mapping], mode: str, seed: int,
                 variables: Sequence[str], typed_pairs: Sequence[tuple[str, str]] = (),
                 task=None, impactful_fraction: float = 0.5,
                 max_tries: int = 64) -> Iterator[TrainingPair]:
    """Deterministic endless stream of training pairs.

    ``exhaustive`` cycles through the ordered product of the dataset with
    itself, each variable in turn. ``uniform`` visits bases in a fresh
    permutation per pass with i.i.d. sources and variables. ``balanced`` is
    ``uniform`` with sources chosen so that a fixed fraction of pairs are
    impactful (their causal interchange label differs from the base label).
    """
    if not dataset:
        raise EmptyDataset("pair sampler needs a nonempty dataset")
    if mode not in PAIR_MODES:
        raise ValueError(f"unknown pair mode {mode!r}")
    if mode == "balanced" and task is None:
        raise ValueError("balanced sampling needs the task to label pairs")
    rng = np.random.default_rng(seed)
    variables = list(variables)
    typed_pairs = list(typed_pairs)
    n = len(dataset)

    def typed():
        return typed_pairs[rng.integers(len(typed_pairs))] if typed_pairs else None

    if mode == "exhaustive":
        while True:
            for b in dataset:
                for s in dataset:
                    for v in variables:
                        yield TrainingPair(b, s, v, typed())

    k = 0
    while True:
        for i in rng.permutation(n):
            base = dataset[i]
            var = variables[rng.integers(len(variables))]
            if mode == "uniform":
                yield TrainingPair(base, dataset[rng.integers(n)], var, typed())
                continue
            want = int((k + 1) * impactful_fraction) > int(k * impactful_fraction)
            k += 1
            base_label = task.label(base)
            # some (base, variable) combinations admit no impactful source, so
            # retries redraw the variable as well as the source
            for attempt in range(max_tries):
                if attempt:
                    var = variables[rng.integers(len(variables))]
                source = dataset[rng.integers(n)]
                label = iit_label(task, var, base, source)
                if task.valid_label(label) and (label != base_label) == want:
                    break
            yield TrainingPair(base, source, var, typed())


# -- objectives on a shared tape ----------------------------------------------

@dataclass
class ProbeHead:
    """Linear classifier from an aligned site to the variable's value space."""

    var: str
    site: str
    classes: tuple

    @property
    def weight_name(self) -> str:
        return f"probe.{self.var}.W"

    @property
    def bias_name(self) -> str:
        return f"probe.{self.var}.b"


def make_probes(task, variables: Sequence[str] | None = None) -> tuple[list[ProbeHead], dict]:
    """Zero-initialized probe heads for the aligned variables."""
    heads, params = [], {}
    for var in variables or task.variables:
        site = task.pi[var]
        head = ProbeHead(var, site, task.probe_space(var))
        width = task.net.site(site).width
        params[head.weight_name] = np.zeros((width, len(head.classes)))
        params[head.bias_name] = np.zeros((1, len(head.classes)))
        heads.append(head)
    return heads, params


@dataclass
class Term:
    loss: ValueRef | None
    correct: int = 0
    count: int = 0


class StepContext:
    """Base and source passes for one minibatch, shared by every objective."""

    def __init__(self, task, tape: Tape, bases: Sequence[Mapping],
                 sources: Sequence[Mapping] | None = None, teacher: bool = True):
        self.task, self.tape = task, tape
        self.net = task.net
        # teacher forcing for sequence outputs; evaluation decodes freely
        self.teacher = teacher
        self.bases = list(bases)
        self.base_batch = self.net.encode(self.bases)
        self.base_out, self.base_acts = self.net.run(
            tape, self.base_batch,
            targets=self.targets(self.base_labels) if teacher else None)
        self.sources = None if sources is None else list(sources)
        self._source_acts = None

    @cached_property
    def base_labels(self) -> list:
        return [self.task.label(b) for b in self.bases]

    def targets(self, labels):
        return self.task.targets(labels) if self.teacher else None

    @property
    def source_acts(self):
        if self._source_acts is None:
            deepest = max((self.net.layer_order().index(self.net.site(s).layer)
                           for s in self.task.pi.values()))
            _, self._source_acts = self.net.run(
                self.tape, self.net.encode(self.sources),
                stop_at=self.net.layer_order()[deepest])
        return self._source_acts

    def intervened(self, rows: Sequence[int], site_from: str, site_to: str, labels):
        net, tape = self.net, self.tape
        sf, st = net.site(site_from), net.site(site_to)
        if sf.width != st.width:
            raise TypeMismatch(f"{site_from} has width {sf.width}, {site_to} has {st.width}")
        base_layer = ad.take_rows(self.base_acts[st.layer], rows)
        repl = ad.slice_cols(ad.take_rows(self.source_acts[sf.layer], rows), sf.lo, sf.hi)
        out, _ = net.run(tape, net.select(self.base_batch, rows), {st.layer: [(st.lo, st.hi, repl)]},
                         targets=self.targets(labels), reuse={st.layer: base_layer})
        return out


def _grouped_term(ctx: StepContext, keys: Sequence, label_fn: Callable,
                  sites_fn: Callable) -> Term:
    task = ctx.task
    groups: dict[Any, list[int]] = defaultdict(list)
    labels: dict[int, Any] = {}
    for i, key in enumerate(keys):
        lab = label_fn(key, ctx.bases[i], ctx.sources[i])
        if task.valid_label(lab):
            groups[key].append(i)
            labels[i] = lab
    total = len(labels)
    if not total:
        return Term(None)
    losses, correct = [], 0
    for key in sorted(groups, key=str):
        rows = groups[key]
        site_from, site_to = sites_fn(key)
        group_labels = [labels[i] for i in rows]
        out = ctx.intervened(rows, site_from, site_to, group_labels)
        losses.append(task.loss(out, group_labels, np.full(len(rows), 1.0 / total)))
        correct += sum(p == y for p, y in zip(task.predict(out), group_labels))
    loss = losses[0]
    for extra in losses[1:]:
        loss = loss + extra
    return Term(loss, correct, total)


def standard_term(ctx: StepContext) -> Term:
    task = ctx.task
    preds = task.predict(ctx.base_out)
    return Term(task.loss(ctx.base_out, ctx.base_labels),
                sum(p == y for p, y in zip(preds, ctx.base_labels)), len(preds))


def iit_term(ctx: StepContext, variables: Sequence[str]) -> Term:
    task = ctx.task
    return _grouped_term(ctx, variables,
                         lambda v, b, s: iit_label(task, v, b, s),
                         lambda v: (task.pi[v], task.pi[v]))


def typed_term(ctx: StepContext, var_pairs: Sequence[tuple[str, str]]) -> Term:
    task = ctx.task
    for a, b in set(var_pairs):
        if task.causal.value_spaces[a] != task.causal.value_spaces[b]:
            raise TypeMismatch(f"Val({a}) != Val({b})")
    return _grouped_term(ctx, var_pairs,
                         lambda vv, b, s: typed_label(task, vv[0], vv[1], b, s),
                         lambda vv: (task.pi[vv[0]], task.pi[vv[1]]))


def multitask_term(ctx: StepContext, heads: Sequence[ProbeHead], probe_params: Mapping) -> Term:
    task, tape = ctx.task, ctx.tape
    n = len(ctx.bases)
    loss, correct, count = None, 0, 0
    for head in heads:
        s = task.net.site(head.site)
        act = ad.slice_cols(ctx.base_acts[s.layer], s.lo, s.hi)
        W = tape.param(head.weight_name, probe_params[head.weight_name])
        b = tape.param(head.bias_name, probe_params[head.bias_name])
        logits = act @ W + ad.broadcast_rows(b, n)
        target = task.probe_target(head.var, ctx.bases)
        term = ad.softmax_cross_entropy(logits, target)
        loss = term if loss is None else loss + term
        correct += int((logits.value.argmax(axis=1) == target).sum())
        count += n
    return Term(loss, correct, count)


def augment_term(ctx: StepContext, rng: np.random.Generator) -> Term:
    task, net = ctx.task, ctx.net
    new = [task.augment(b, s, rng) for b, s in zip(ctx.bases, ctx.sources)]
    labels = [task.label(x) for x in new]
    out, _ = net.run(ctx.tape, net.encode(new), targets=task.targets(labels))
    preds = task.predict(out)
    return Term(task.loss(out, labels), sum(p == y for p, y in zip(preds, labels)), len(labels))


# -- standalone losses --------------------------------------------------------

def iit_loss(task, var: str, bases, sources, tape: Tape | None = None) -> ValueRef:
    """IIT loss of aligned interchanges on ``var``, averaged over the pairs."""
    tape = Tape() if tape is None else tape
    bases, sources = as_batch(bases), as_batch(sources)
    ctx = StepContext(task, tape, bases, sources)
    return iit_term(ctx, [var] * len(bases)).loss


def typed_iit_loss(task, var_from: str, var_to: str, bases, sources,
                   tape: Tape | None = None) -> ValueRef:
    tape = Tape() if tape is None else tape
    bases, sources = as_batch(bases), as_batch(sources)
    ctx = StepContext(task, tape, bases, sources)
    return typed_term(ctx, [(var_from, var_to)] * len(bases)).loss


def multitask_loss(task, heads: Sequence[ProbeHead], probe_params: Mapping, examples,
                   tape: Tape | None = None) -> ValueRef:
    """Sum over probed variables of the mean probe cross-entropy."""
    tape = Tape() if tape is None else tape
    ctx = StepContext(task, tape, as_batch(examples))
    return multitask_term(ctx, heads, probe_params).loss


def augment(task, base: Mapping, source: Mapping, rng: np.random.Generator) -> tuple[dict, Any]:
    """A new input built by an input-level swap, labeled by the causal model."""
    new = task.augment(base, source, rng)
    return new, task.label(new)


# -- training loop ------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    losses: dict[str, float]
    accuracies: dict[str, float]
    steps: int

    def as_record(self) -> dict:
        rec: dict[str, Any] = {"epoch": self.epoch, "steps": self.steps}
        rec.update({f"loss.{k}": v for k, v in self.losses.items()})
        rec.update({f"acc.{k}": v for k, v in self.accuracies.items()})
        return rec


class Trainer:
    """Runs interchange intervention training on ``task.net`` in place."""

    def __init__(self, task, config: ObjectiveConfig):
        self.task, self.config = task, config
        self.variables = list(config.variables or task.variables)
        for v in self.variables:
            if v not in task.pi:
                raise ValueError(f"{v} is not aligned")
        self.typed_pairs = [p for p in task.typed_pairs
                            if p[0] in self.variables and p[1] in self.variables]
        if config.weight("typed_iit") > 0 and not self.typed_pairs:
            raise ValueError("typed IIT needs variables sharing a value space")
        self.heads, self.probe_params = make_probes(task, self.variables)
        self.optimizer = make_optimizer(config)
        self.rng = np.random.default_rng([config.seed, 2])
        self.steps = 0

    @property
    def needs_sources(self) -> bool:
        c = self.config
        return any(c.weight(k) > 0 for k in ("iit", "typed_iit", "augment"))

    def step(self, pairs: Sequence[TrainingPair]) -> dict[str, Term]:
        """One update on a minibatch of pairs; the causal model is never differentiated."""
        c, task = self.config, self.task
        tape = Tape()
        ctx = StepContext(task, tape, [p.base for p in pairs],
                          [p.source for p in pairs] if self.needs_sources else None)
        terms: dict[str, Term] = {}
        if c.weight("standard") > 0:
            terms["standard"] = standard_term(ctx)
        if c.weight("iit") > 0:
            terms["iit"] = iit_term(ctx, [p.variable for p in pairs])
        if c.weight("typed_iit") > 0:
            terms["typed_iit"] = typed_term(ctx, [p.typed for p in pairs])
        if c.weight("multitask") > 0:
            terms["multitask"] = multitask_term(ctx, self.heads, self.probe_params)
        if c.weight("augment") > 0:
            terms["augment"] = augment_term(ctx, self.rng)

        total = None
        for name, term in terms.items():
            if term.loss is None:
                continue
            weighted = ad.scalar_mul(term.loss, c.weight(name))
            total = weighted if total is None else total + weighted
        if total is None:
            return terms
        if not np.isfinite(total.value[0, 0]):
            raise DivergenceError(f"non-finite loss at step {self.steps}")
        grads = ad.backward(tape, total)
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient at step {self.steps}")
        scale = 1.0
        if c.lr_decay_every > 0:
            scale = c.lr_decay ** (self.steps // c.lr_decay_every)
        net_grads = {k: g for k, g in grads.items() if k in task.net.params}
        probe_grads = {k: g for k, g in grads.items() if k in self.probe_params}
        self.optimizer.step(task.net.params, net_grads, scale)
        self.optimizer.step(self.probe_params, probe_grads, scale)
        self.steps += 1
        return terms

    def pairs(self, dataset: Sequence[Mapping]) -> Iterator[TrainingPair]:
        c = self.config
        typed = self.typed_pairs if c.weight("typed_iit") > 0 else ()
        return pair_sampler(dataset, c.pair_mode, c.seed, self.variables, typed,
                            self.task, c.impactful_fraction)

    def fit(self, dataset: Sequence[Mapping], pairs: Iterator[TrainingPair] | None = None,
            steps_per_epoch: int | None = None,
            on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
        c = self.config
        if not dataset:
            raise EmptyDataset("training set is empty")
        stream = self.pairs(dataset) if pairs is None else iter(pairs)
        if steps_per_epoch is None:
            items = len(dataset) ** 2 * len(self.variables) if c.pair_mode == "exhaustive" \
                else len(dataset)
            steps_per_epoch = max(1, -(-items // c.batch_size))
        history = []
        for epoch in range(c.epochs):
            sums: dict[str, float] = defaultdict(float)
            hits: dict[str, list[int]] = defaultdict(lambda: [0, 0])
            done = 0
            for _ in range(steps_per_epoch):
                batch = []
                for pair in stream:
                    batch.append(pair)
                    if len(batch) == c.batch_size:
                        break
                if not batch:
                    break
                for name, term in self.step(batch).items():
                    if term.loss is not None:
                        sums[name] += float(term.loss.value[0, 0])
                    hits[name][0] += term.correct
                    hits[name][1] += term.count
                done += 1
            stats = EpochStats(
                epoch, {k: v / max(done, 1) for k, v in sums.items()},
                {k: (h[0] / h[1] if h[1] else 0.0) for k, h in hits.items()}, done)
            log.info("epoch %d %s", epoch, stats.as_record())
            history.append(stats)
            if on_epoch is not None:
                on_epoch(stats)
        return history


def train(task, dataset: Sequence[Mapping], config: ObjectiveConfig,
          pairs: Sequence[TrainingPair] | None = None, **kwargs):
    """Train ``task.net`` in place; returns ``(net, per-epoch stats, trainer)``."""
    trainer = Trainer(task, config)
    stats = trainer.fit(dataset, pairs=pairs, **kwargs)
    return task.net, stats, trainer
