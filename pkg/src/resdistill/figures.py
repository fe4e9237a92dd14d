"""Figure rendering for CLI reports; the library protocols stay plot-free."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def render_score_histogram(report, path, bins: int = 100) -> Path:
    """Positive/negative cosine score distributions of a verification run."""
    path = Path(path)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(report.neg_scores, bins=edges, alpha=0.6, label="different", color="tab:blue")
    ax.hist(report.pos_scores, bins=edges, alpha=0.6, label="same", color="tab:orange")
    ax.axvline(report.threshold, color="k", linestyle="--",
               label=f"threshold {report.threshold:.3f}")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("pair count")
    ax.set_title(f"verification accuracy {report.accuracy:.4f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_metrics_curves(metrics_csv, path) -> Path:
    """Loss components over training steps from a metrics CSV."""
    path = Path(path)
    steps, series = [], {"cls": [], "kd": [], "rcd": [], "total": []}
    with open(metrics_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            for key in series:
                series[key].append(float(row[key]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, values in series.items():
        ax.plot(steps, values, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
