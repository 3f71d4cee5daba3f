"""Report rows and the CSV writer.

Numbers are written with 17 significant digits through ``format`` (locale
independent); +inf / -inf are the literal strings ``inf`` / ``-inf``. Runtimes
go to a ``.timing.csv`` sidecar so that the main CSV stays byte-identical
across runs.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ReportRow:
    experiment: str
    seed: int
    params: dict
    metrics: dict
    runtime_ms: float = field(default=0.0, compare=False)

    @property
    def columns(self):
        return ("experiment", "seed") + tuple(self.params) + tuple(self.metrics)

    def values(self):
        return [self.experiment, self.seed] + list(self.params.values()) + list(self.metrics.values())


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    if isinstance(v, str):
        return v
    raise TypeError(f"cannot write {type(v).__name__} value {v!r} to CSV")


def _write(path, header, body):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)


def write_csv(rows, path):
    if not rows:
        raise ValueError("no rows to write")
    cols = rows[0].columns
    for k, r in enumerate(rows):
        if r.columns != cols:
            raise ValueError(f"row {k} has columns {r.columns}, expected {cols}")
    _write(path, cols, ([format_value(v) for v in r.values()] for r in rows))


def timing_path(path) -> str:
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".timing.csv"


def write_timing(rows, path):
    """Per-row runtimes (ms) in the same row order as the report."""
    if not rows:
        raise ValueError("no rows to write")
    cols = ("experiment", "seed") + tuple(rows[0].params) + ("runtime_ms",)
    _write(path, cols, ([format_value(v) for v in [r.experiment, r.seed, *r.params.values(), float(r.runtime_ms)]]
                        for r in rows))


def read_csv(path):
    """Rows as dicts of strings (for tests and plotting)."""
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
