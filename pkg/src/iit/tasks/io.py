"""Line-delimited JSON datasets with a versioned header line."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

from iit.tasks import gridnav, pvr

VERSION = 1


def pvr_record(ex: Mapping) -> dict:
    labels = pvr.labels_of(ex)
    return {"labels": list(labels), "input": [x for i in pvr.INPUTS for x in ex[i]],
            "output": pvr.pvr_output(*labels)}


def pvr_from_record(rec: Mapping) -> dict:
    flat = rec["input"]
    if len(flat) != 10 * len(pvr.INPUTS):
        raise ValueError("PVR input must have 40 entries")
    ex = {name: tuple(float(x) for x in flat[10 * k:10 * k + 10])
          for k, name in enumerate(pvr.INPUTS)}
    if list(pvr.labels_of(ex)) != list(rec["labels"]):
        raise ValueError("input encoding disagrees with labels")
    return ex


CODECS = {
    "pvr": (pvr_record, pvr_from_record),
    "gridnav": (gridnav.to_record, gridnav.from_record),
}


def write_jsonl(path: str | Path, kind: str, examples: Iterable[Mapping],
                split: str = "") -> int:
    encode, _ = CODECS[kind]
    count = 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": f"iit-{kind}", "version": VERSION, "split": split},
                            sort_keys=True) + "\n")
        for ex in examples:
            fh.write(json.dumps(encode(ex), sort_keys=True) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> tuple[str, list[dict]]:
    """Returns ``(kind, examples)``."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        fmt = header.get("format", "")
        if not fmt.startswith("iit-") or fmt[4:] not in CODECS:
            raise ValueError(f"unknown dataset format {fmt!r}")
        if header.get("version") != VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')!r}")
        kind = fmt[4:]
        _, decode = CODECS[kind]
        return kind, [decode(json.loads(line)) for line in fh if line.strip()]
