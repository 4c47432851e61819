"""Atomic file output and the JSON tensor checkpoint format."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "eqspike-checkpoint"
CHECKPOINT_VERSION = 1


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    atomic_write_text(path, buf.getvalue())


def tensors_to_json(arrays: dict) -> dict:
    return {
        name: {"shape": list(a.shape), "data": [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]}
        for name, a in arrays.items()
    }


def tensors_from_json(obj: dict) -> dict:
    out = {}
    for name, t in obj.items():
        data = np.array(t["data"], dtype=np.float64)
        shape = tuple(t["shape"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"tensor {name!r}: {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out


def save_tensors(path, kind: str, config: dict, arrays: dict, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "params": tensors_to_json(arrays),
    }
    if extra:
        doc["extra"] = extra
    write_json(path, doc)


def load_tensors(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an eqspike checkpoint")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    return doc["kind"], doc["config"], tensors_from_json(doc["params"]), doc.get("extra", {})
