"""Turn metrics CSVs into curve data plus a standalone matplotlib script.

Nothing is rendered here.  ``emit_plots`` writes one ``curves_<task>.csv``
per task (step, mean, ci95, n) aggregated across the input files, which are
treated as seeds, and a ``plot_curves.py`` that draws them.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .orchestrator import METRICS_HEADER


class MetricsFormatError(ValueError):
    pass


RENDER_SCRIPT = '''\
"""Render return-vs-step curves (mean with 95% confidence band)."""
import csv
import glob
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, "curves.png")
fig, ax = plt.subplots(figsize=(6, 4))
for path in sorted(glob.glob(os.path.join(here, "curves_*.csv"))):
    task = os.path.basename(path)[len("curves_"):-len(".csv")]
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    step = [float(r["step"]) for r in rows]
    mean = [float(r["mean"]) for r in rows]
    ci = [float(r["ci95"]) for r in rows]
    ax.plot(step, mean, label=task)
    ax.fill_between(step, [m - c for m, c in zip(mean, ci)],
                    [m + c for m, c in zip(mean, ci)], alpha=0.25)
ax.set_xlabel("environment step")
ax.set_ylabel("episode return")
ax.legend()
fig.tight_layout()
fig.savefig(out)
print(out)
'''


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise MetricsFormatError(f"{path}: unexpected header {header!r}")
        return [dict(zip(header, row)) for row in reader]


def mean_ci(values) -> tuple[float, float]:
    x = np.asarray(values, dtype=np.float64)
    if len(x) < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(1.96 * x.std(ddof=1) / math.sqrt(len(x)))


def aggregate(paths) -> dict[str, list[tuple[int, float, float, int]]]:
    """``task -> [(step, mean, ci95, n_seeds)]`` over rows that carry a return."""
    per_task: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for path in paths:
        for row in read_metrics(path):
            if row["return"] == "" or row["phase"] == "pt":
                continue
            task = row["task"] or "none"
            per_task[task][int(row["step"])].append(float(row["return"]))
    out = {}
    for task, by_step in per_task.items():
        out[task] = [(step, *mean_ci(vals), len(vals)) for step, vals in sorted(by_step.items())]
    return out


def emit_plots(paths, out_dir) -> list[Path]:
    paths = list(paths)
    if not paths:
        raise ValueError("no metrics files given")
    curves = aggregate(paths)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for task, rows in sorted(curves.items()):
        p = out / f"curves_{task}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mean", "ci95", "n"])
            for step, mean, ci, n in rows:
                w.writerow([step, repr(mean), repr(ci), n])
        written.append(p)
    script = out / "plot_curves.py"
    script.write_text(RENDER_SCRIPT)
    written.append(script)
    return written
