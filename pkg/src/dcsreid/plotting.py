"""Figures for training histories, CMC curves and search trajectories.

Uses the non-interactive Agg backend; every function writes one file and
returns its path.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.4,
    "savefig.bbox": "tight",
}


def _finite(xs, ys):
    pairs = [(x, y) for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def plot_history(history: list[dict], path) -> Path:
    """Losses (left) and IB / IBB plus retrieval metrics (right) per epoch."""
    path = Path(path)
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(9.0, 3.4))
        for key, label in (("ce", "cross-entropy"), ("triplet", "triplet")):
            ax_l.plot(*_finite(epochs, [r.get(key) for r in history]), label=label)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("batch loss")
        ax_l.legend()
        for key, label, style in (("ibb", "IBB (probe)", "-"), ("ib", "IB (probe)", "--")):
            ax_r.plot(*_finite(epochs, [r.get(key) for r in history]), style, label=label)
        ax_r.set_xlabel("epoch")
        ax_r.set_ylabel("nats")
        xs, ys = _finite(epochs, [r.get("map") for r in history])
        if xs:
            ax_m = ax_r.twinx()
            ax_m.plot(xs, ys, "o-", color="tab:green", ms=3, label="mAP")
            ax_m.set_ylim(0, 1.02)
            ax_m.set_ylabel("mAP")
            ax_m.legend(loc="center right")
        ax_r.legend(loc="upper right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_cmc(cmc, path, label: str | None = None) -> Path:
    path = Path(path)
    ranks = list(range(1, len(cmc) + 1))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.step(ranks, cmc, where="post", label=label)
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate")
        ax.set_ylim(0, 1.02)
        ax.set_xticks(ranks)
        if label:
            ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_search(trajectory: list[dict], path) -> Path:
    """Search losses and the entropy of every width choice."""
    path = Path(path)
    epochs = [r["epoch"] for r in trajectory]
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(9.0, 3.4))
        ax_l.plot(epochs, [r["weight_loss"] for r in trajectory], label="weight split")
        ax_l.plot(epochs, [r["arch_loss"] for r in trajectory], label="architecture split")
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("loss")
        ax_l.legend()
        keys = sorted(k for k in (trajectory[0] if trajectory else {}) if k.startswith("entropy_"))
        for k in keys:
            ax_r.plot(epochs, [r[k] for r in trajectory], label=f"stage {k.split('_')[1]}")
        ax_r.set_xlabel("epoch")
        ax_r.set_ylabel("option entropy (nats)")
        if keys:
            ax_r.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
