"""PNG figures next to a report CSV (needs the optional matplotlib extra)."""
from __future__ import annotations

import os
from collections import defaultdict

import numpy as np


def _numeric(vals):
    try:
        return [float(v) for v in vals]
    except (TypeError, ValueError):
        return None


def plot_report(rows, csv_path, metric: str | None = None) -> str:
    """Seed-averaged ``metric`` against the first swept numeric parameter,
    one line per combination of the other parameters. Returns the PNG path."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .experiments import PRESETS

    preset = PRESETS[rows[0].experiment]
    metric = metric or preset.plot_metric
    params = list(rows[0].params)
    swept = [p for p in params if len({str(r.params[p]) for r in rows}) > 1]
    numeric = [p for p in swept if _numeric([r.params[p] for r in rows]) is not None]
    x_key = numeric[-1] if numeric else (swept[-1] if swept else (params[0] if params else None))
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        label = ", ".join(f"{p}={r.params[p]}" for p in swept if p != x_key)
        x = r.params[x_key] if x_key else r.seed
        groups[label][x].append(float(r.metrics[metric]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in groups.items():
        xs = list(pts)
        ys = [np.mean(pts[x]) for x in xs]
        nx = _numeric(xs)
        ax.plot(nx if nx is not None else [str(x) for x in xs], ys, marker="o", label=label or None)
    ax.set_xlabel(x_key or "seed")
    ax.set_ylabel(f"mean {metric}")
    ax.set_title(preset.name)
    if any(groups):
        ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    out = os.path.splitext(os.fspath(csv_path))[0] + ".png"
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
