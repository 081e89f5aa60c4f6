"""Figure rendering for reports: prediction/error panels, convergence curves
and metric summaries. All figures are written to files (Agg backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_comparison_figure(
    pred: np.ndarray,
    ref: np.ndarray,
    out_path: str | Path,
    error_vmax: float | None = None,
    title: str = "",
) -> Path:
    """Side-by-side prediction, reference and absolute-error map with a shared
    intensity scale; ``error_vmax`` pins the error color scale across methods."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    err = np.abs(pred - ref)
    if error_vmax is None:
        error_vmax = float(err.max()) or 1.0
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (img, name, cmap, vmin, vmax) in zip(
        axes,
        [
            (pred, "prediction", "gray", -1.0, 1.0),
            (ref, "reference", "gray", -1.0, 1.0),
            (err, "abs error", "inferno", 0.0, error_vmax),
        ],
    ):
        im = ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(name)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_convergence_curve(validation_csv: str | Path, out_path: str | Path,
                           label: str = "validation NMAE") -> Path:
    with open(validation_csv) as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    vals = [float(r["nmae"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, vals, marker="o", ms=3)
    ax.set_xlabel("step")
    ax.set_ylabel(label)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_metrics_overview(summary: dict, out_path: str | Path) -> Path:
    """Bar chart of aggregate mean +/- std per metric from a summary dict."""
    names = list(summary.keys())
    means = [summary[n]["mean"] for n in names]
    stds = [summary[n]["std"] for n in names]
    fig, axes = plt.subplots(1, len(names), figsize=(2.2 * max(len(names), 1), 3))
    if len(names) == 1:
        axes = [axes]
    for ax, name, mean, std in zip(axes, names, means, stds):
        ax.bar([0], [mean], yerr=[std], width=0.5, capsize=4)
        ax.set_xticks([])
        ax.set_title(name)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
