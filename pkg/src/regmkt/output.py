"""CSV/JSON writers.  Every file starts with a provenance comment line."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__


def header_line(master_seed: int, config_hash: str) -> str:
    return f"# regmkt {__version__} master_seed={master_seed} config_hash={config_hash}"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path: Path, columns: list[str], rows, master_seed: int, config_hash: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(header_line(master_seed, config_hash) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c) for c in columns]
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: Path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path: Path, payload: dict, master_seed: int, config_hash: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"_meta": {"tool": "regmkt", "version": __version__,
                     "master_seed": master_seed, "config_hash": config_hash}}
    doc.update(payload)

    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    path.write_text(json.dumps(doc, indent=2, sort_keys=False, default=default) + "\n")
    return path
