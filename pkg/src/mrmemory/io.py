"""CSV and manifest output.

Every number is written in the shortest decimal form that parses back to the
same float (``repr``), so files are byte-identical across identical runs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAJECTORY_COLUMNS = ("tau", "t_phys", "y1", "y2", "w1", "w2", "abs_w", "v1", "v2",
                      "envelope", "asymptotic_bound")
RELAXATION_COLUMNS = ("tau", "psi", "phi", "psi_asymptotic")
ENVELOPE_COLUMNS = ("tau", "envelope", "series_part", "phi_part", "const_part", "truncation_bound")


def format_number(x) -> str:
    x = float(x)
    if x != x:
        return "nan"
    return repr(x)


def write_csv(path, columns, rows_by_column) -> Path:
    """Write equal-length columns (scalars are broadcast) to ``path``."""
    arrays = [np.asarray(rows_by_column[c], dtype=float) for c in columns]
    length = max((a.size for a in arrays if a.ndim), default=1)
    arrays = [np.broadcast_to(a, (length,)) for a in arrays]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in zip(*arrays):
            fh.write(",".join(format_number(v) for v in row) + "\n")
    return path


def read_csv(path) -> dict:
    """Read a file written by :func:`write_csv` into a column dict."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2) if os.path.getsize(path) > 0 else np.empty((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}


def write_rows(path, header, rows) -> Path:
    """Write a table of mixed strings and numbers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_number(v) if isinstance(v, (float, np.floating)) else str(v)
                              for v in row) + "\n")
    return path


@dataclass
class RunManifest:
    """Record of one CLI run: settings hash, outputs and metrics."""

    command: str
    config_hash: str
    version: str
    outputs: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def add_output(self, path):
        self.outputs.append(str(path))

    def missing_outputs(self) -> list:
        return [p for p in self.outputs if not Path(p).exists()]

    def as_dict(self) -> dict:
        return {
            "command": self.command, "config_hash": self.config_hash, "version": self.version,
            "outputs": list(self.outputs), "bounds": self.bounds, "metrics": self.metrics,
            "wall_clock": self.wall_clock, "failures": list(self.failures),
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path
