"""Paired ablation runs: same data and seed, one switch flipped.

Supported axes: the center-loss weight (mu=0 vs configured mu), hard example
mining (random balanced sampling vs loss-ranked), and single- vs multi-scale
operation. Each run reports AP on a held-out set plus the within-class
feature compactness (trace of the per-class covariance of refinement-head
features), which operationalizes "intra-class variation" as a number.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .config import Config
from .detector import TrainState, detect_dataset, proposal_features
from .evaluation import pr_curve_ap
from .geometry import Box
from .matching import NEGATIVE, POSITIVE
from .training import run_training

__all__ = ["AXES", "evaluate_model", "feature_compactness", "run_ablation"]

AXES = ("mu", "ohem", "scales")
EVAL_SCORE_THRESHOLD = 0.05  # low floor: AP wants the full ranking


def feature_compactness(
    state: TrainState,
    data: Sequence[tuple[np.ndarray, Sequence[Box]]],
    cfg: Optional[Config] = None,
) -> dict:
    """Per-class covariance trace of head features over a held-out set.

    The trace is the sum of per-dimension population variances, i.e. the mean
    squared distance of each feature vector from its class mean.
    """
    cfg = cfg if cfg is not None else state.model.cfg
    collected = {POSITIVE: [], NEGATIVE: []}
    for image, gts in data:
        feats, labels = proposal_features(state.model, image, gts, cfg)
        for cls in (POSITIVE, NEGATIVE):
            rows = feats[labels == cls]
            if rows.size:
                collected[cls].append(rows)
    out = {}
    for cls, key in ((POSITIVE, "face"), (NEGATIVE, "background")):
        if collected[cls]:
            x = np.vstack(collected[cls])
            centered = x - x.mean(axis=0, keepdims=True)
            out[f"{key}_feature_trace"] = float((centered**2).sum(axis=1).mean())
            out[f"{key}_count"] = int(x.shape[0])
        else:
            out[f"{key}_feature_trace"] = 0.0
            out[f"{key}_count"] = 0
    return out


def evaluate_model(
    state: TrainState,
    data: Sequence[tuple[np.ndarray, Sequence[Box]]],
    cfg: Optional[Config] = None,
    scales: Optional[tuple[float, ...]] = None,
    iou_threshold: float = 0.5,
    jobs: int = 1,
    score_threshold: float = EVAL_SCORE_THRESHOLD,
) -> tuple[list, float]:
    """Detect over a labeled set and score it; returns (per-image samples, AP)."""
    cfg = cfg if cfg is not None else state.model.cfg
    images = [img for img, _ in data]
    dets = detect_dataset(
        state.model, state.centers, images, score_threshold, cfg, scales=scales, jobs=jobs
    )
    samples = [(d, list(gts)) for d, (_, gts) in zip(dets, data)]
    _, ap = pr_curve_ap(samples, iou_threshold)
    return samples, ap


def _axis_pair(cfg: Config, axis: str) -> list[tuple[str, Config, Optional[tuple[float, ...]]]]:
    """(run name, training config, evaluation scale set or None) for both arms."""
    if axis == "mu":
        return [
            ("mu=0", replace(cfg, mu=0.0), None),
            (f"mu={cfg.mu}", cfg, None),
        ]
    if axis == "ohem":
        return [
            ("ohem=off", replace(cfg, ohem=False, ohem_rpn=False), None),
            ("ohem=on", replace(cfg, ohem=True, ohem_rpn=True), None),
        ]
    if axis == "scales":
        return [
            ("single-scale", replace(cfg, multiscale_train=False, scales=(1.0,)), None),
            ("multi-scale", cfg, tuple(cfg.scales)),
        ]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def run_ablation(
    cfg: Config,
    axis: str,
    train_data: Sequence[tuple[np.ndarray, Sequence[Box]]],
    heldout_data: Sequence[tuple[np.ndarray, Sequence[Box]]],
    jobs: int = 1,
) -> dict:
    """Train both arms of one ablation axis and compare them on held-out data."""
    runs = []
    for name, run_cfg, eval_scales in _axis_pair(cfg, axis):
        state, history = run_training(run_cfg, train_data)
        _, ap = evaluate_model(state, heldout_data, run_cfg, scales=eval_scales, jobs=jobs)
        row = {"name": name, "ap": ap, "history": history}
        row.update(feature_compactness(state, heldout_data, run_cfg))
        runs.append(row)
    base, variant = runs
    report = {
        "axis": axis,
        "runs": runs,
        "ap_delta": variant["ap"] - base["ap"],
    }
    if base["face_feature_trace"] > 0:
        report["face_trace_ratio"] = variant["face_feature_trace"] / base["face_feature_trace"]
    return report
