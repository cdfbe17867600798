"""Training loop: cycles the dataset, logs losses, writes checkpoints."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import Config, serialize_config
from .detector import StepReport, TrainState, make_train_state, save_checkpoint, train_step
from .geometry import Box

__all__ = ["LOG_COLUMNS", "run_training", "write_loss_log"]

LOG_COLUMNS = [
    "step",
    "rpn_cls",
    "rpn_reg",
    "cls",
    "reg",
    "center",
    "total",
    "objective",
    "cls_face",
    "cls_background",
    "n_proposals",
    "n_selected_pos",
    "n_selected_neg",
]


def report_row(r: StepReport) -> dict:
    return {
        "step": r.step,
        "rpn_cls": r.rpn_cls,
        "rpn_reg": r.rpn_reg,
        "cls": r.head.cls,
        "reg": r.head.reg,
        "center": r.head.center,
        "total": r.head.total,
        "objective": r.objective,
        "cls_face": r.cls_face,
        "cls_background": r.cls_background,
        "n_proposals": r.n_proposals,
        "n_selected_pos": r.n_selected_pos,
        "n_selected_neg": r.n_selected_neg,
    }


def run_training(
    cfg: Config,
    dataset: Sequence[tuple[np.ndarray, Sequence[Box]]],
    out_dir: Optional[Path] = None,
    checkpoint_every: int = 0,
    progress: Optional[Callable[[StepReport], None]] = None,
) -> tuple[TrainState, list[dict]]:
    """Train for cfg.steps single-image steps, cycling the dataset in order.

    When ``out_dir`` is given, writes config.txt up front, then model.ckpt,
    loss_log.csv and periodic snapshots. Returns the final state and the
    per-step loss rows.
    """
    if not dataset and cfg.steps > 0:
        raise ValueError("cannot train on an empty dataset")
    state = make_train_state(cfg)
    history: list[dict] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(serialize_config(cfg))
    for k in range(cfg.steps):
        image, gts = dataset[k % len(dataset)]
        state, report = train_step(state, [(image, gts)], cfg)
        history.append(report_row(report))
        if progress is not None:
            progress(report)
        if out_dir is not None and checkpoint_every > 0 and state.step % checkpoint_every == 0:
            save_checkpoint(out_dir / f"model_{state.step:06d}.ckpt", state, cfg)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", state, cfg)
        write_loss_log(out_dir / "loss_log.csv", history)
    return state, history


def write_loss_log(path: Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
