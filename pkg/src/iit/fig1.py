"""One-step reproduction of the conjunction worked example."""
from __future__ import annotations

from dataclasses import dataclass, field

from iit.metrics import behavioral_accuracy, int_inv_acc
from iit.network import neural_interchange
from iit.objectives import ObjectiveConfig, TrainingPair, iit_label, train
from iit.tasks.conjunction import UPDATED_PARAMS, build_conjunction

LR = 0.1
TOLERANCE = 1e-3
BASE = {"B1": True, "B2": False}
SOURCE = {"B1": False, "B2": True}


@dataclass
class PairOutcome:
    variable: str
    base: tuple[bool, bool]
    source: tuple[bool, bool]
    label: bool
    before: float
    after: float

    @property
    def match_before(self) -> bool:
        return (self.before > 0) == self.label

    @property
    def match_after(self) -> bool:
        return (self.after > 0) == self.label


@dataclass
class Fig1Result:
    behavior_before: float
    behavior_after: float
    hits_before: int
    hits_after: int
    pairs: int
    params_after: dict
    max_weight_error: float
    outcomes: list[PairOutcome] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _flat(params: dict) -> list[float]:
    return list(params["W1"]) + list(params["W2"]) + list(params["w"]) + [params["b"]]


def _logits(task):
    out = {}
    for var in task.variables:
        for b in task.inputs():
            for s in task.inputs():
                y = neural_interchange(task.net, [b], [s], task.pi[var]).value[0, 0]
                out[var, b["B1"], b["B2"], s["B1"], s["B2"]] = float(y)
    return out


def reproduce_fig1(lr: float = LR) -> Fig1Result:
    """Initial net, one IIT step on the example pair, final net; all checks recorded."""
    task, _ = build_conjunction()
    inputs = task.inputs()

    def hits():
        return sum(int_inv_acc(task, v).hits for v in task.variables)

    beh0, hits0, before = behavioral_accuracy(task, inputs), hits(), _logits(task)
    config = ObjectiveConfig(weights={"iit": 1.0}, lr=lr, optimizer="sgd", epochs=1,
                             batch_size=1)
    train(task, inputs, config, pairs=[TrainingPair(BASE, SOURCE, "V2")], steps_per_epoch=1)
    beh1, hits1, after = behavioral_accuracy(task, inputs), hits(), _logits(task)

    params = task.params_flat()
    err = max(abs(a - b) for a, b in zip(_flat(params), _flat(UPDATED_PARAMS)))
    outcomes = []
    for (var, b1, b2, s1, s2), y0 in before.items():
        label = iit_label(task, var, {"B1": b1, "B2": b2}, {"B1": s1, "B2": s2})
        outcomes.append(PairOutcome(var, (b1, b2), (s1, s2), label, y0,
                                    after[var, b1, b2, s1, s2]))
    n = 4 * 4 * len(task.variables)
    failures = []
    if beh0 != 1.0:
        failures.append(f"initial behavioral accuracy {beh0}")
    if hits0 != 26:
        failures.append(f"initial IntInvAcc {hits0}/{n}")
    if err > TOLERANCE:
        failures.append(f"weights off by {err:.4g}")
    if beh1 != 1.0:
        failures.append(f"final behavioral accuracy {beh1}")
    if hits1 != n:
        failures.append(f"final IntInvAcc {hits1}/{n}")
    return Fig1Result(beh0, beh1, hits0, hits1, n, params, err, outcomes, failures)


def _bits(pair) -> str:
    return "".join("T" if x else "F" for x in pair)


def format_table(result: Fig1Result) -> str:
    lines = [f"{'var':<4}{'base':<6}{'source':<8}{'label':<7}{'before':>9}{'':3}{'after':>9}{'':3}"]
    for o in result.outcomes:
        lines.append(
            f"{o.variable:<4}{_bits(o.base):<6}{_bits(o.source):<8}{str(o.label):<7}"
            f"{o.before:>9.4f}{' ok' if o.match_before else ' XX'}"
            f"{o.after:>9.4f}{' ok' if o.match_after else ' XX'}")
    return "\n".join(lines)
