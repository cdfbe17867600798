"""Figure rendering for reports: ROC/PR curves, loss traces, ablation summaries.

Uses the Agg backend and strips the Software metadata chunk so PNG output is
byte-stable across reruns.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import PrPoint, RocPoint  # noqa: E402

__all__ = [
    "save_ablation_figure",
    "save_loss_figure",
    "save_pr_figure",
    "save_roc_figure",
]

_SAVE_KW = dict(metadata={"Software": None}, dpi=110)


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_roc_figure(
    discrete: Sequence[RocPoint],
    continuous: Sequence[RocPoint],
    path: Path,
    fp_count: int | None = None,
) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    ax.plot(
        [p.false_positives for p in discrete],
        [p.true_positive_rate for p in discrete],
        drawstyle="steps-post", label="discrete",
    )
    ax.plot(
        [p.false_positives for p in continuous],
        [p.true_positive_rate for p in continuous],
        drawstyle="steps-post", label="continuous",
    )
    if fp_count is not None:
        ax.axvline(fp_count, color="gray", linestyle=":", linewidth=1)
    ax.set_xlabel("false positives")
    ax.set_ylabel("true positive rate")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def save_pr_figure(points: Sequence[PrPoint], ap: float, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    ax.plot([p.recall for p in points], [p.precision for p in points])
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"AP = {ap:.4f}")
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def save_loss_figure(history: Sequence[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    steps = [row["step"] for row in history]
    for key in ("objective", "rpn_cls", "cls", "reg", "center"):
        ax.plot(steps, [row[key] for row in history], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(ncol=2, fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def save_ablation_figure(report: dict, path: Path) -> None:
    """Two panels: per-class loss traces for both runs, compactness + AP bars."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10.0, 4.2))
    for run in report["runs"]:
        steps = [row["step"] for row in run["history"]]
        ax1.plot(steps, [row["cls_face"] for row in run["history"]],
                 label=f"{run['name']} face", linewidth=1)
        ax1.plot(steps, [row["cls_background"] for row in run["history"]],
                 label=f"{run['name']} background", linewidth=1, linestyle="--")
    ax1.set_xlabel("step")
    ax1.set_ylabel("per-class classification loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=7)
    ax1.grid(True, alpha=0.3)

    names = [run["name"] for run in report["runs"]]
    x = range(len(names))
    traces = [run["face_feature_trace"] for run in report["runs"]]
    aps = [run["ap"] for run in report["runs"]]
    ax2.bar([i - 0.18 for i in x], traces, width=0.36, label="face feature variance")
    ax2b = ax2.twinx()
    ax2b.bar([i + 0.18 for i in x], aps, width=0.36, color="tab:orange", label="AP")
    ax2b.set_ylim(0.0, 1.05)
    ax2.set_xticks(list(x))
    ax2.set_xticklabels(names, fontsize=8)
    ax2.set_ylabel("within-class covariance trace")
    ax2b.set_ylabel("AP")
    lines1, labels1 = ax2.get_legend_handles_labels()
    lines2, labels2 = ax2b.get_legend_handles_labels()
    ax2.legend(lines1 + lines2, labels1 + labels2, fontsize=7)
    _save(fig, path)
