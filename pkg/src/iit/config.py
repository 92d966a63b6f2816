"""Experiment configuration: sectioned TOML with a strict schema.

Unknown sections or keys, wrong types and missing required fields are all
errors, reported with the offending field and its line when known.
"""
from __future__ import annotations

import copy
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from iit.errors import ConfigError

TASKS = ("conjunction", "pvr", "gridnav")
REQUIRED = object()

# section -> key -> (type, default); task-specific defaults are merged on top
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "experiment": {"task": (str, REQUIRED), "seed": (int, REQUIRED), "out": (str, "")},
    "objectives": {"standard": (float, 0.0), "iit": (float, 0.0), "typed_iit": (float, 0.0),
                   "multitask": (float, 0.0), "augment": (float, 0.0),
                   "variables": (list, [])},
    "optimizer": {"kind": (str, "sgd"), "lr": (float, 0.01), "epochs": (int, 1),
                  "batch_size": (int, 32), "pair_mode": (str, "uniform"),
                  "impactful_fraction": (float, 0.5), "lr_decay": (float, 1.0),
                  "lr_decay_every": (int, 0)},
    "data": {"split": (str, "disabled"), "train": (int, 0), "dev": (int, 0),
             "test": (int, 0), "zero_shot": (int, 0), "noise": (float, 0.0)},
    "model": {"block": (int, 16), "hidden": (int, 64), "shared_encoder": (bool, True),
              "k": (int, 8), "m": (int, 16)},
    "alignment": {},
    "eval": {"pairs": (str, "sampled:1000"), "sets": (list, ["train", "dev", "test", "zero_shot"])},
}

MODEL_KEYS = {"conjunction": set(), "pvr": {"block", "hidden", "shared_encoder"},
              "gridnav": {"k", "m"}}
SPLITS = {"conjunction": ("disabled",), "pvr": ("systematic", "disabled"),
          "gridnav": ("novel_color", "novel_size", "novel_direction", "disabled")}

TASK_DEFAULTS: dict[str, dict[str, dict[str, Any]]] = {
    "conjunction": {
        "objectives": {"iit": 1.0},
        "optimizer": {"kind": "sgd", "lr": 0.1, "epochs": 1, "batch_size": 32,
                      "pair_mode": "exhaustive"},
        "eval": {"pairs": "exhaustive", "sets": ["train"]},
    },
    "pvr": {
        "objectives": {"iit": 1.0, "typed_iit": 1.0, "multitask": 1.0},
        "optimizer": {"kind": "adam", "lr": 0.003, "epochs": 20, "batch_size": 64},
        "data": {"split": "systematic", "train": 10000, "dev": 1000, "test": 1000,
                 "zero_shot": 1000},
    },
    "gridnav": {
        "objectives": {"standard": 1.0, "iit": 1.0, "multitask": 1.0},
        "optimizer": {"kind": "adam", "lr": 0.003, "epochs": 40, "batch_size": 64,
                      "lr_decay": 0.5, "lr_decay_every": 790},
        "data": {"split": "novel_direction", "train": 5000, "dev": 500, "test": 500,
                 "zero_shot": 500},
        "eval": {"pairs": "sampled:1000"},
    },
}


@dataclass
class ExperimentConfig:
    """Fully resolved configuration (every field present)."""

    values: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def task(self) -> str:
        return self.values["experiment"]["task"]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    def to_toml(self) -> str:
        return tomli_w.dumps(self.values)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        values = copy.deepcopy(self.values)
        values["experiment"]["seed"] = seed
        return ExperimentConfig(values)


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        head = re.match(r"\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _check_type(value: Any, kind: Any, field: str) -> Any:
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is list and isinstance(value, list) and all(isinstance(v, str) for v in value):
        return list(value)
    if kind in (str, bool) and type(value) is kind:
        return value
    raise ConfigError(f"{field}: expected {kind.__name__}, got {type(value).__name__}")


def resolve(raw: Mapping[str, Any], text: str = "") -> ExperimentConfig:
    """Validate a parsed document and fill defaults."""

    def fail(msg, section, key=None):
        # a missing key is reported at its section header
        line = (_line_of(text, section, key) or _line_of(text, section, None)) if text else None
        where = f"line {line}: " if line else ""
        raise ConfigError(f"{where}{section}{'.' + key if key else ''}: {msg}")

    for section, body in raw.items():
        if section not in SCHEMA:
            fail("unknown section", section)
        if not isinstance(body, Mapping):
            fail("expected a table", section)
    exp = raw.get("experiment", {})
    for key in ("task", "seed"):
        if key not in exp:
            fail("required field missing", "experiment", key)
    task = exp["task"]
    if task not in TASKS:
        fail(f"unknown task {task!r}", "experiment", "task")

    values: dict[str, dict[str, Any]] = {}
    for section, fields in SCHEMA.items():
        merged = {k: d for k, (_, d) in fields.items()}
        merged.update(copy.deepcopy(TASK_DEFAULTS[task].get(section, {})))
        user = raw.get(section, {})
        if section == "alignment":
            for var, site in user.items():
                if not isinstance(site, str):
                    fail("site names must be strings", section, var)
            values[section] = dict(user)
            continue
        for key, value in user.items():
            if key not in fields:
                fail("unknown key", section, key)
            if section == "model" and key not in MODEL_KEYS[task]:
                fail(f"not a {task} model option", section, key)
            try:
                merged[key] = _check_type(value, fields[key][0], f"{section}.{key}")
            except ConfigError as exc:
                fail(str(exc).split(": ", 1)[1], section, key)
        if section == "model":
            merged = {k: v for k, v in merged.items() if k in MODEL_KEYS[task]}
        values[section] = merged

    # a user objectives table replaces the task default weights entirely
    if "objectives" in raw:
        for name in ("standard", "iit", "typed_iit", "multitask", "augment"):
            values["objectives"][name] = float(raw["objectives"].get(name, 0.0))

    weights = [values["objectives"][k] for k in ("standard", "iit", "typed_iit",
                                                 "multitask", "augment")]
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        fail("weights must be non-negative with at least one positive", "objectives")
    opt = values["optimizer"]
    if opt["kind"] not in ("sgd", "adam"):
        fail(f"unknown optimizer {opt['kind']!r}", "optimizer", "kind")
    if opt["lr"] < 0:
        fail("must be non-negative", "optimizer", "lr")
    if opt["epochs"] < 0:
        fail("must be non-negative", "optimizer", "epochs")
    if opt["batch_size"] <= 0:
        fail("must be positive", "optimizer", "batch_size")
    if opt["pair_mode"] not in ("exhaustive", "uniform", "balanced"):
        fail(f"unknown pair mode {opt['pair_mode']!r}", "optimizer", "pair_mode")
    if not 0 <= opt["impactful_fraction"] <= 1:
        fail("must lie in [0, 1]", "optimizer", "impactful_fraction")
    data = values["data"]
    if data["split"] not in SPLITS[task]:
        fail(f"split must be one of {SPLITS[task]}", "data", "split")
    if task != "conjunction":
        for key in ("train", "dev", "test"):
            if data[key] <= 0:
                fail("must be positive", "data", key)
    if not 0 <= data["noise"] < 1:
        fail("must lie in [0, 1)", "data", "noise")
    ev = values["eval"]
    if ev["pairs"] != "exhaustive" and not re.fullmatch(r"sampled:[1-9][0-9]*", ev["pairs"]):
        fail("expected 'exhaustive' or 'sampled:N'", "eval", "pairs")
    for name in ev["sets"]:
        if name not in ("train", "dev", "test", "zero_shot"):
            fail(f"unknown evaluation set {name!r}", "eval", "sets")
    return ExperimentConfig(values)


def parse(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {exc}") from None
    return resolve(raw, text)


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse(text)
