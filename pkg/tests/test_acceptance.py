"""End-to-end acceptance criteria 1-8, each reporting one PASS/FAIL line.

Criteria 4 and 6 train real models (several minutes in total).
"""
import copy
import itertools
import statistics
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from iit import autodiff as ad
from iit.autodiff import grad_check
from iit.cli import build_data, build_task, main, objective_config
from iit.config import ExperimentConfig, load
from iit.fig1 import reproduce_fig1
from iit.metrics import Sampled, behavioral_accuracy, int_inv_acc
from iit.network import NeuralEvaluator
from iit.objectives import Trainer
from iit.scm import abstraction_check
from iit.tasks import gridnav as gn
from iit.tasks.boolean import BooleanCircuitTask
from iit.tasks.conjunction import ConjunctionTask

from conftest import ACCEPTANCE

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (0, 1, 2)


@contextmanager
def criterion(number, title):
    details: dict = {}
    status = "FAIL"
    start = time.perf_counter()
    try:
        yield details
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        info = ", ".join(f"{k}={v}" for k, v in details.items())
        line = f"criterion {number} {status}: {title} ({info}) [{elapsed:.1f}s]"
        ACCEPTANCE.append(line)
        print(line)


# -- 1 ---------------------------------------------------------------------------

def test_criterion_1_fig1_reproduction():
    with criterion(1, "one-step toy reproduction") as d:
        start = time.perf_counter()
        r = reproduce_fig1()
        elapsed = time.perf_counter() - start
        d.update(before=f"{r.hits_before}/{r.pairs}", after=f"{r.hits_after}/{r.pairs}",
                 weight_err=f"{r.max_weight_error:.1e}")
        assert r.behavior_before == 1.0 and r.behavior_after == 1.0
        assert (r.hits_before, r.hits_after, r.pairs) == (26, 32, 32)
        assert r.max_weight_error <= 1e-3
        assert r.passed and elapsed < 1.0


# -- 2 ---------------------------------------------------------------------------

def _mismatches(task):
    """Summed 0/1 IIT loss over every ordered pair, per variable (batched network runs)."""
    est = {v: int_inv_acc(task, v) for v in task.variables}
    return sum(e.count - e.hits for e in est.values()), est


def _checks(task, inputs):
    pairs = list(itertools.product(inputs, inputs))
    ev = NeuralEvaluator(task.net)
    return {v: abstraction_check(task.causal, ev, task.alignment, v, pairs) for v in task.variables}


def test_criterion_2_zero_loss_abstraction():
    with criterion(2, "zero loss entails abstraction") as d:
        start = time.perf_counter()
        cases = consistent = 0
        for seed in range(100):
            task = BooleanCircuitTask(seed)
            loss, est = _mismatches(task)
            checks = _checks(task, task.all_inputs())
            assert loss == 0 and all(checks.values())
            for v, ok in checks.items():
                cases += 1
                consistent += (est[v].value == 1.0) == ok
        toy = ConjunctionTask()
        toy_loss, est = _mismatches(toy)
        toy_checks = _checks(toy, toy.inputs())
        for v, ok in toy_checks.items():
            cases += 1
            consistent += (est[v].value == 1.0) == ok
        d.update(circuits=100, toy_loss=toy_loss, iff=f"{consistent}/{cases}")
        assert toy_loss > 0 and not all(toy_checks.values())
        assert consistent == cases
        assert time.perf_counter() - start < 30


# -- 3 ---------------------------------------------------------------------------

def _primitive_builds():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 4))
    return {
        "matmul": lambda t, r: ad.total(r["a"] @ t.const(W)),
        "add": lambda t, r: ad.total(ad.mul(r["a"] + r["b"], r["a"])),
        "mul": lambda t, r: ad.total(ad.mul(r["a"], r["b"])),
        "scalar_mul": lambda t, r: ad.total(ad.mul(r["a"] * 2.5, r["a"])),
        "total": lambda t, r: ad.total(ad.mul(r["a"], r["a"])),
        "concat": lambda t, r: ad.total(ad.tanh(ad.concat([r["a"], r["b"]]))),
        "concat_rows": lambda t, r: ad.total(ad.tanh(ad.concat([r["a"], r["b"]], axis=0))),
        "slice_cols": lambda t, r: ad.total(ad.tanh(ad.slice_cols(r["a"], 1, 3))),
        "slice_rows": lambda t, r: ad.total(ad.tanh(ad.slice_rows(r["a"], 0, 1))),
        "take_rows": lambda t, r: ad.total(ad.tanh(ad.take_rows(r["a"], [1, 1, 0]))),
        "relu": lambda t, r: ad.total(ad.mul(ad.relu(r["a"]), r["b"])),
        "tanh": lambda t, r: ad.total(ad.tanh(r["a"])),
        "sigmoid": lambda t, r: ad.total(ad.sigmoid(r["a"])),
        "softmax": lambda t, r: ad.total(ad.mul(ad.softmax(r["a"]), r["b"])),
        "softmax_cross_entropy": lambda t, r: ad.softmax_cross_entropy(r["a"], [2, 0]),
        "logistic_loss": lambda t, r: ad.logistic_loss(ad.slice_cols(r["a"], 0, 1), [1.0, 0.0]),
        "embedding_lookup": lambda t, r: ad.total(ad.tanh(ad.embedding_lookup(r["b"], [1, 0, 1]))),
        "broadcast_rows": lambda t, r: ad.total(ad.tanh(ad.broadcast_rows(ad.slice_rows(r["a"], 1, 2), 3))),
        "repeat_rows": lambda t, r: ad.total(ad.tanh(ad.repeat_rows(r["a"], 2))),
        "reshape": lambda t, r: ad.total(ad.tanh(ad.reshape(r["a"], (3, 2)))),
        "overwrite": lambda t, r: ad.total(ad.tanh(ad.overwrite(r["a"], ad.slice_cols(r["b"], 0, 2), 1, 3))),
    }


def _random_composition(seed):
    rng = np.random.default_rng(seed)
    unary = [ad.relu, ad.tanh, ad.sigmoid, ad.softmax, lambda a: a * 0.5]
    ops = [int(x) for x in rng.integers(0, 9, size=int(rng.integers(1, 7)))]
    mats = [rng.normal(size=(3, 3)) for _ in ops]

    def build(t, r):
        a, b = r["a"], r["b"]
        for op, M in zip(ops, mats):
            if op < 5:
                a, b = unary[op](a), a
            elif op == 5:
                a, b = a + b, a
            elif op == 6:
                a, b = ad.mul(a, b), a
            elif op == 7:
                a, b = a @ t.const(M), a
            else:
                a, b = ad.overwrite(a, ad.slice_cols(b, 0, 1), 2, 3), a
        return ad.softmax_cross_entropy(a, [0, 2])

    return build


def _bifurcated(t, r):
    """Shared weights in both passes of an interchange: base rows 0, source rows 1."""
    x = t.const([[1.0, 0.0, 0.5], [0.2, 1.0, -1.0]])
    h = ad.tanh(x @ r["W"])
    base, source = ad.slice_rows(h, 0, 1), ad.slice_rows(h, 1, 2)
    mixed = ad.overwrite(base, ad.slice_cols(source, 1, 3), 1, 3)
    return ad.softmax_cross_entropy(mixed @ r["V"], [1])


def test_criterion_3_autodiff_correctness():
    with criterion(3, "gradient checks") as d:
        start = time.perf_counter()
        rng = np.random.default_rng(1)
        worst = 0.0
        prims = _primitive_builds()
        for name, build in prims.items():
            params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))}
            worst = max(worst, grad_check(build, params))
        for seed in range(50):
            params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))}
            worst = max(worst, grad_check(_random_composition(seed), params))
        worst = max(worst, grad_check(_bifurcated, {"W": rng.normal(size=(3, 3)),
                                                    "V": rng.normal(size=(3, 4))}))
        d.update(primitives=len(prims), compositions=50, max_rel_err=f"{worst:.1e}")
        assert worst < 1e-4
        assert time.perf_counter() - start < 30


# -- 4 ---------------------------------------------------------------------------

def _variant(cfg: ExperimentConfig, seed: int, **weights) -> ExperimentConfig:
    values = copy.deepcopy(cfg.values)
    values["experiment"]["seed"] = seed
    if weights:
        for k in ("standard", "iit", "typed_iit", "multitask", "augment"):
            values["objectives"][k] = float(weights.get(k, 0.0))
    return ExperimentConfig(values)


def _train(cfg):
    task = build_task(cfg)
    sets = build_data(cfg, task)
    Trainer(task, objective_config(cfg)).fit(sets["train"])
    return task, sets


def _pvr_zero_shot(cfg):
    task, sets = _train(cfg)
    zs = sets["zero_shot"]
    behavior = behavioral_accuracy(task, zs)
    iia = np.mean([int_inv_acc(task, v, Sampled(1000, cfg.seed), zs).value for v in task.variables])
    return behavior, float(iia)


@pytest.mark.slow
def test_criterion_4_pvr_systematic_generalization():
    with criterion(4, "symbolic PVR zero-shot") as d:
        start = time.perf_counter()
        full_cfg = load(CONFIGS / "pvr.toml")
        std_cfg = load(CONFIGS / "pvr_standard.toml")
        rows = []
        for seed in SEEDS:
            full = _pvr_zero_shot(_variant(full_cfg, seed))
            std = _pvr_zero_shot(_variant(std_cfg, seed))
            notype = _pvr_zero_shot(_variant(full_cfg, seed, iit=1.0, multitask=1.0))
            rows.append((full, std, notype))
            print(f"  seed {seed}: full {full}, standard {std}, no typing {notype}")
        med = lambda xs: statistics.median(xs)
        full_beh = med([r[0][0] for r in rows])
        full_iia = med([r[0][1] for r in rows])
        std_gap = med([r[0][0] - r[1][0] for r in rows])
        typed_gap = med([r[0][1] - r[2][1] for r in rows])
        d.update(full_behavior=f"{full_beh:.3f}", full_iia=f"{full_iia:.3f}",
                 standard_gap=f"{std_gap:.3f}", typing_gap=f"{typed_gap:.3f}")
        assert all(r[0][0] > r[1][0] and r[0][1] > r[2][1] for r in rows), "ordering"
        assert full_beh >= 0.90 and full_iia >= 0.85
        assert std_gap >= 0.30 and typed_gap >= 0.20
        assert time.perf_counter() - start <= 600


# -- 5 ---------------------------------------------------------------------------

def test_criterion_5_gridnav_oracle():
    with criterion(5, "grid-nav oracle self-consistency") as d:
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        landed = parse_errors = 0
        for _ in range(1000):
            ex = gn.random_example(rng)
            try:
                parsed = gn.parse_command(ex["I_Com"])
                parse_errors += gn.format_command(*parsed) != ex["I_Com"]
            except gn.ParseError:
                parse_errors += 1
                continue
            world = ex["I_World"]
            target = gn.resolve_target(world, *parsed)
            pose = gn.simulate(world, gn.emit_actions(*gn.position_deltas(target, world.agent)))
            landed += (pose.row, pose.col) == target and pose.off_grid == 0
        d.update(landed=f"{landed}/1000", parse_errors=parse_errors)
        assert landed == 1000 and parse_errors == 0
        assert time.perf_counter() - start < 5


# -- 6 ---------------------------------------------------------------------------

def _gridnav_scores(cfg):
    task, sets = _train(cfg)
    return behavioral_accuracy(task, sets["dev"]), behavioral_accuracy(task, sets["zero_shot"])


@pytest.mark.slow
def test_criterion_6_gridnav_novel_direction():
    with criterion(6, "grid-nav novel direction") as d:
        start = time.perf_counter()
        iit_cfg = load(CONFIGS / "gridnav.toml")
        std_cfg = load(CONFIGS / "gridnav_standard.toml")
        rows = []
        for seed in SEEDS:
            iit = _gridnav_scores(_variant(iit_cfg, seed))
            std = _gridnav_scores(_variant(std_cfg, seed))
            rows.append((iit, std))
            print(f"  seed {seed}: IIT dev/zero-shot {iit}, standard {std}")
        d.update(iit_dev=[round(r[0][0], 3) for r in rows],
                 iit_zero_shot=[round(r[0][1], 3) for r in rows],
                 standard_zero_shot=[round(r[1][1], 3) for r in rows])
        assert all(r[0][1] - r[1][1] >= 0.10 for r in rows)
        assert all(r[0][0] >= 0.95 for r in rows)
        assert time.perf_counter() - start <= 1200


# -- 7 ---------------------------------------------------------------------------

def test_criterion_7_estimator_convergence():
    with criterion(7, "sampled IntInvAcc convergence") as d:
        start = time.perf_counter()
        task = ConjunctionTask()
        exact = np.mean([int_inv_acc(task, v).value for v in task.variables])
        good = 0
        for seed in range(100):
            est = np.mean([int_inv_acc(task, v, Sampled(10_000, seed)).value
                           for v in task.variables])
            good += abs(est - exact) < 0.01
        d.update(exhaustive=exact, within=f"{good}/100")
        assert good >= 99
        assert time.perf_counter() - start < 10


# -- 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path, capsys):
    with criterion(8, "byte-identical reruns") as d:
        small_pvr = tmp_path / "pvr.toml"
        small_pvr.write_text(
            '[experiment]\ntask = "pvr"\nseed = 5\n'
            '[optimizer]\nepochs = 2\n[data]\ntrain = 300\ndev = 50\ntest = 50\nzero_shot = 50\n'
            '[model]\nblock = 4\nhidden = 16\n')
        same = 0
        for name, cfg in (("conjunction", CONFIGS / "conjunction.toml"), ("pvr", small_pvr)):
            outs = [tmp_path / f"{name}{i}" for i in range(2)]
            for out in outs:
                assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
            for f in ("model.ckpt", "report.json", "epochs.jsonl"):
                same += (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        d.update(identical_files=f"{same}/6")
        assert same == 6
