"""Static SVG figures for metric reports and training curves.

Figures are written with a fixed hash salt and without a date stamp so that
re-rendering the same report yields the same bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

STYLE = {
    "svg.hashsalt": "scenegraph",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
}
_METADATA = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_METADATA)
    plt.close(fig)
    return path


def plot_metric_report(report: MetricReport, path) -> Path:
    """One line per (metric, protocol) over K; rows without a numeric K are shown as bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        curves: dict[tuple[str, str], list[tuple[int, float]]] = {}
        flat: list[tuple[str, float]] = []
        for row in report.rows:
            if row.value is None:
                continue
            if isinstance(row.k, int) or str(row.k).isdigit():
                curves.setdefault((row.metric, row.protocol), []).append((int(row.k), row.value))
            else:
                flat.append((f"{row.metric}/{row.protocol}", row.value))
        if curves:
            for (metric, protocol), pts in curves.items():
                pts.sort()
                ax.plot([k for k, _ in pts], [v for _, v in pts], marker="o", label=f"{metric} ({protocol})")
            ax.set_xlabel("K")
            ax.legend(frameon=False)
        else:
            ax.bar(range(len(flat)), [v for _, v in flat])
            ax.set_xticks(range(len(flat)), [n for n, _ in flat], rotation=30, ha="right")
        ax.set_ylabel("value (%)")
        fig.tight_layout()
        return _save(fig, path)


def plot_per_predicate(recalls: Mapping[int, float], path, title: str = "per-predicate recall",
                       names: Sequence[str] | None = None) -> Path:
    """Bar chart of recall for each predicate present in the evaluation gt."""
    ids = sorted(recalls)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * len(ids) + 1.0), 3.0))
        ax.bar(range(len(ids)), [recalls[i] for i in ids], color="#2b8cbe")
        labels = [names[i] if names else str(i) for i in ids]
        ax.set_xticks(range(len(ids)), labels, rotation=45 if names else 0, ha="right" if names else "center")
        ax.set_ylim(0, 100)
        ax.set_xlabel("predicate")
        ax.set_ylabel("recall (%)")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_training(losses: Sequence[float], val_history: Sequence[tuple[int, float]], path) -> Path:
    """Loss per iteration (left axis) and validation R@20 at each evaluation (right axis)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(range(1, len(losses) + 1), losses, color="#08589e", label="loss")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        if val_history:
            ax2 = ax.twinx()
            ax2.plot([i for i, _ in val_history], [v for _, v in val_history], "o-", color="#d95f02",
                     label="val R@20")
            ax2.set_ylabel("val R@20 (%)")
            ax2.set_ylim(0, 100)
        fig.tight_layout()
        return _save(fig, path)
