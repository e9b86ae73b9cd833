"""Output helpers: metadata headers, JSON documents and delimited tables.

Every output carries tool version, seed, model hash and a timestamp.  The
timestamp lives on its own header line (CSV) or metadata key (JSON) so that
determinism checks can compare the data payload alone.
"""
from __future__ import annotations

import csv
import json
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__


def metadata(command: str, seed=None, model=None, **extra) -> dict:
    meta = {"tool": "branchlab", "version": __version__, "command": command,
            "seed": seed, "model": getattr(model, "name", None),
            "model_hash": model.digest() if model is not None else None}
    meta.update(extra)
    meta["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return meta


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps_document(meta: dict, data) -> str:
    return json.dumps({"metadata": _clean(meta), "data": _clean(data)}, indent=2, sort_keys=True) + "\n"


def write_json(path, meta: dict, data) -> Path:
    path = Path(path)
    path.write_text(dumps_document(meta, data))
    return path


def header_lines(meta: dict) -> list[str]:
    return [f"{k}: {meta[k]}" for k in sorted(meta)]


def write_table(path, columns, rows, meta: dict | None = None) -> Path:
    """CSV with '# key: value' metadata lines followed by a header row and data."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if meta:
            for line in header_lines(meta):
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def payload(text: str) -> str:
    """Data part of a CSV or JSON output, for byte-level determinism comparisons."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.dumps(json.loads(text)["data"], sort_keys=True)
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))
