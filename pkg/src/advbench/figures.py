"""Rendering of figure-series CSVs to PNG line plots."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

__all__ = ["render_series"]

_YLABEL = {"fgsm": "accuracy (%)", "pgd": "error (%)"}
_XLABEL = {"perturbation": "perturbation budget", "iterations": "attack iterations"}


def render_series(series_csv, out_png=None) -> Path:
    """Plot one curve per column of a series file; returns the PNG path.

    Series files are named {dataset}_{attack}_{mode}.csv, which supplies
    the title and axis labels.
    """
    series_csv = Path(series_csv)
    out_png = Path(out_png) if out_png else series_csv.with_suffix(".png")
    with series_csv.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    param_name, curve_names = header[0], header[1:]
    x = [float(r[0]) for r in rows]

    dataset, attack, mode = series_csv.stem.rsplit("_", 2)
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    for j, name in enumerate(curve_names):
        y = [float(r[j + 1]) if r[j + 1] != "" else float("nan") for r in rows]
        ax.plot(x, y, marker="o", linewidth=1.5, markersize=4, label=name)
    ax.set_xlabel(_XLABEL.get(param_name, param_name))
    ax.set_ylabel(_YLABEL.get(attack, "value"))
    ax.set_title(f"{dataset}: {attack} ({mode})")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # Pin the PNG metadata so re-renders are byte-identical.
    fig.savefig(out_png, metadata={"Software": "advbench"})
    plt.close(fig)
    return out_png
