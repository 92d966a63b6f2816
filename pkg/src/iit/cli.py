"""Command-line experiment runner.

Exit codes: 0 success, 1 failed reproduction check, 2 configuration or usage
error, 3 training diverged, 4 corrupted or mismatched checkpoint.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from iit import __version__, checkpoint, metrics
from iit.config import ExperimentConfig, load
from iit.errors import ChecksumMismatch, ConfigError, DivergenceError, ShapeError
from iit.fig1 import LR, format_table, reproduce_fig1
from iit.objectives import ObjectiveConfig, Trainer
from iit.tasks import gridnav, io, pvr
from iit.tasks.conjunction import ConjunctionTask

log = logging.getLogger("iit")

EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 1, 2, 3, 4
SET_NAMES = ("train", "dev", "test", "zero_shot")


# -- experiment assembly ------------------------------------------------------

def build_task(cfg: ExperimentConfig):
    model = cfg["model"]
    if cfg.task == "conjunction":
        task = ConjunctionTask()
    elif cfg.task == "pvr":
        task = pvr.PvrTask(cfg.seed, model["block"], model["hidden"], model["shared_encoder"])
    else:
        task = gridnav.GridNavTask(cfg.seed, k=model["k"], m=model["m"])
    pi = dict(task.pi)
    for var, site in cfg["alignment"].items():
        if var not in pi:
            raise ConfigError(f"alignment.{var}: not an aligned variable of {cfg.task}")
        if site not in task.net.sites:
            raise ConfigError(f"alignment.{var}: no site {site!r}; "
                              f"known sites: {', '.join(sorted(task.net.sites))}")
        pi[var] = site
    if len(set(pi.values())) != len(pi):
        raise ConfigError("alignment: two variables share a site")
    task.pi = pi
    for var in cfg["objectives"]["variables"]:
        if var not in pi:
            raise ConfigError(f"objectives.variables: {var!r} is not aligned")
    return task


def build_data(cfg: ExperimentConfig, task) -> dict[str, list]:
    data = cfg["data"]
    if cfg.task == "conjunction":
        return {"train": task.inputs()}
    if cfg.task == "pvr":
        return pvr.gen_pvr_dataset(data["train"], pvr.SplitSpec(enabled=data["split"] != "disabled"),
                                   data["noise"], cfg.seed, data["dev"], data["zero_shot"],
                                   data["test"])
    counts = {k: data[k] for k in SET_NAMES}
    return gridnav.gen_gridnav_splits(data["split"], counts, cfg.seed)


def objective_config(cfg: ExperimentConfig) -> ObjectiveConfig:
    o, opt = cfg["objectives"], cfg["optimizer"]
    weights = {k: o[k] for k in ("standard", "iit", "typed_iit", "multitask", "augment") if o[k] > 0}
    return ObjectiveConfig(
        weights=weights, lr=opt["lr"], optimizer=opt["kind"], epochs=opt["epochs"],
        seed=cfg.seed, batch_size=opt["batch_size"], pair_mode=opt["pair_mode"],
        impactful_fraction=opt["impactful_fraction"], variables=o["variables"] or None,
        lr_decay=opt["lr_decay"], lr_decay_every=opt["lr_decay_every"])


def evaluate_sets(cfg: ExperimentConfig, task, sets: dict, names: Sequence[str],
                  pairs_text: str) -> dict[str, dict]:
    pairs = metrics.parse_pairs(pairs_text)
    if isinstance(pairs, metrics.Sampled):
        pairs = metrics.Sampled(pairs.n, cfg.seed)
    out = {}
    for name in names:
        items = sets.get(name)
        if not items:
            continue
        report = metrics.evaluate(task, items, pairs, typed=cfg.task == "pvr",
                                  sequence=cfg.task == "gridnav")
        out[name] = report.as_dict()
    return out


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg["experiment"]["out"] or f"runs/{cfg.task}-{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.pairs:
        metrics.parse_pairs(args.pairs)
        cfg["eval"]["pairs"] = args.pairs
    return cfg


# -- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _load_config(args)
    task = build_task(cfg)
    sets = build_data(cfg, task)
    out = _out_dir(args, cfg)
    (out / "config.toml").write_text(cfg.to_toml())
    epoch_log = out / "epochs.jsonl"
    records: list[dict] = []
    with open(epoch_log, "w") as fh:
        def on_epoch(stats):
            rec = stats.as_record()
            records.append(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        trainer = Trainer(task, objective_config(cfg))
        try:
            trainer.fit(sets["train"], on_epoch=on_epoch)
        except DivergenceError as exc:
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    train_seconds = time.perf_counter() - started

    params = dict(task.net.params)
    params.update(trainer.probe_params)
    ckpt = out / "model.ckpt"
    checkpoint.save(ckpt, params)
    results = evaluate_sets(cfg, task, sets, cfg["eval"]["sets"], cfg["eval"]["pairs"])
    report = {
        "version": __version__,
        "config": cfg.values,
        "epochs": records,
        "metrics": results,
        "checksums": {"model.ckpt": _sha(ckpt), "epochs.jsonl": _sha(epoch_log)},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    # wall-clock lives apart so reports stay byte-identical across runs
    (out / "timing.json").write_text(json.dumps(
        {"train_seconds": train_seconds, "total_seconds": time.perf_counter() - started},
        indent=2) + "\n")
    _print_metrics(results)
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    task = build_task(cfg)
    params = checkpoint.load(args.checkpoint)
    checkpoint.check_template(params, task.net.params)
    task.net.params = {k: params[k] for k in task.net.params}
    sets = build_data(cfg, task)
    names = args.sets.split(",") if args.sets else cfg["eval"]["sets"]
    for name in names:
        if name not in SET_NAMES:
            raise ConfigError(f"--sets: unknown set {name!r}")
    results = evaluate_sets(cfg, task, sets, names, cfg["eval"]["pairs"])
    text = json.dumps(results, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_reproduce_fig1(args) -> int:
    started = time.perf_counter()
    result = reproduce_fig1(args.lr)
    print(format_table(result))
    print()
    print(f"initial mismatches: {result.pairs - result.hits_before}")
    print(f"behavioral accuracy: {result.behavior_before:.2%} -> {result.behavior_after:.2%}")
    print(f"IntInvAcc: {result.hits_before}/{result.pairs} ({result.hits_before / result.pairs:.2%})"
          f" -> {result.hits_after}/{result.pairs} ({result.hits_after / result.pairs:.2%})")
    p = result.params_after
    print("updated parameters: " + ", ".join(
        f"{k}={np.round(np.asarray(v), 4).tolist()}" for k, v in p.items()))
    print(f"max weight error: {result.max_weight_error:.2e} (tolerance 1e-3)")
    print(f"elapsed: {time.perf_counter() - started:.3f}s")
    if result.passed:
        print("PASS")
        return 0
    for f in result.failures:
        print(f"FAIL: {f}")
    return EXIT_FAIL


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if cfg.task == "conjunction":
        raise ConfigError("experiment.task: conjunction inputs are enumerated, not generated")
    task = build_task(cfg)
    sets = build_data(cfg, task)
    out = _out_dir(args, cfg)
    for name, items in sets.items():
        n = io.write_jsonl(out / f"{name}.jsonl", cfg.task, items, name)
        print(f"{name}: {n} examples")
    return 0


def _print_metrics(results: dict) -> None:
    for name, block in results.items():
        iia = {k.split(".", 1)[1]: v for k, v in block.items() if k.startswith("int_inv_accuracy.")}
        mean = sum(iia.values()) / len(iia) if iia else float("nan")
        print(f"{name:<10} behavioral {block['behavioral_accuracy']:.4f}  IntInvAcc {mean:.4f}")


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iit", description="Interchange intervention training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--pairs", help="exhaustive or sampled:N")
        if out:
            p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("train", help="train a model and write checkpoint, epoch log and report")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="recompute metrics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--sets", help="comma-separated subset of train,dev,test,zero_shot")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("reproduce-fig1", help="one IIT step on the conjunction toy")
    p.add_argument("--lr", type=float, default=LR,
                   help="learning rate (a wrong value is a negative control)")
    p.set_defaults(func=cmd_reproduce_fig1)
    p = sub.add_parser("gen-data", help="write generated datasets as JSONL")
    common(p)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if isinstance(exc, ShapeError):
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ChecksumMismatch as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
