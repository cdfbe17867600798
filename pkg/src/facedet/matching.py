"""Ground-truth assignment for anchors and proposals, plus balanced hard mining.

Label constants follow the usual detection convention: 1 positive, 0 negative,
-1 ignore. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, Delta, boxes_to_array, encode_delta, iou_matrix

__all__ = [
    "IGNORE",
    "NEGATIVE",
    "POSITIVE",
    "LabeledSample",
    "OhemConfig",
    "balanced_random_select",
    "label_anchors",
    "label_proposals",
    "ohem_select",
]

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class LabeledSample:
    index: int
    label: int  # POSITIVE / NEGATIVE / IGNORE
    matched_gt: Optional[int] = None
    target_delta: Optional[Delta] = None

    def __post_init__(self) -> None:
        if self.label not in (POSITIVE, NEGATIVE, IGNORE):
            raise ValueError(f"bad label {self.label}")
        has_match = self.matched_gt is not None
        has_delta = self.target_delta is not None
        if (self.label == POSITIVE) != has_match or has_match != has_delta:
            raise ValueError("positive iff matched_gt present iff target_delta present")


@dataclass(frozen=True)
class OhemConfig:
    """Mini-batch size for hard-example selection; the pos:neg ratio is fixed 1:1."""

    batch_size: int = 128

    def __post_init__(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")

    @property
    def per_class(self) -> int:
        return self.batch_size // 2


def _inside_image(boxes: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    return (
        (boxes[:, 0] >= 0.0)
        & (boxes[:, 1] >= 0.0)
        & (boxes[:, 2] <= image_w)
        & (boxes[:, 3] <= image_h)
    )


def label_anchors(
    anchors: Sequence[Box],
    gts: Sequence[Box],
    image_w: int,
    image_h: int,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> list[LabeledSample]:
    """Assign {positive, negative, ignore} labels to a grid of anchors.

    An anchor is positive if it is the best-IoU anchor for some ground truth
    (every gt claims its best in-image anchor, ties to the lowest anchor
    index) or if its IoU with any gt exceeds ``pos_iou``. It is negative if
    its best IoU over all gts is below ``neg_iou``. Anchors extending outside
    the image are ignored outright. Positives carry the encoded delta toward
    their best-IoU gt.
    """
    n = len(anchors)
    if n == 0:
        return []
    anchor_arr = boxes_to_array(anchors)
    inside = _inside_image(anchor_arr, float(image_w), float(image_h))

    labels = np.full(n, IGNORE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)

    if not gts:
        labels[inside] = NEGATIVE
    else:
        overlaps = iou_matrix(anchor_arr, boxes_to_array(gts))
        overlaps[~inside] = -1.0  # out-of-image anchors never match
        best_iou = overlaps.max(axis=1)
        best_gt = overlaps.argmax(axis=1)

        labels[inside & (best_iou < neg_iou)] = NEGATIVE
        labels[inside & (best_iou > pos_iou)] = POSITIVE

        # highest-IoU clause: each gt claims its best in-image anchor
        if inside.any():
            for g in range(len(gts)):
                col = overlaps[:, g]
                claim = int(col.argmax())  # argmax takes the lowest index on ties
                if not inside[claim]:
                    continue  # no in-image anchor at all
                labels[claim] = POSITIVE
                if best_iou[claim] <= 0.0:
                    matched[claim] = g  # claimed without overlap; keep the claimant

        pos = labels == POSITIVE
        unset = pos & (matched < 0)
        matched[unset] = best_gt[unset]

    out: list[LabeledSample] = []
    for i in range(n):
        if labels[i] == POSITIVE:
            g = int(matched[i])
            out.append(
                LabeledSample(i, POSITIVE, g, encode_delta(gts[g], anchors[i]))
            )
        else:
            out.append(LabeledSample(i, int(labels[i])))
    return out


def label_proposals(
    proposals: Sequence[Box],
    gts: Sequence[Box],
    pos_iou: float = 0.5,
    neg_lo: float = 0.1,
    neg_hi: float = 0.5,
) -> list[LabeledSample]:
    """Assign labels to second-stage proposals.

    Positive when the best IoU with any gt reaches ``pos_iou``; negative when
    it falls in [neg_lo, neg_hi); anything below neg_lo is ignored as easy
    background. With no gts every proposal is ignored.
    """
    n = len(proposals)
    if n == 0:
        return []
    if not gts:
        return [LabeledSample(i, IGNORE) for i in range(n)]
    overlaps = iou_matrix(boxes_to_array(proposals), boxes_to_array(gts))
    best_iou = overlaps.max(axis=1)
    best_gt = overlaps.argmax(axis=1)
    out: list[LabeledSample] = []
    for i in range(n):
        if best_iou[i] >= pos_iou:
            g = int(best_gt[i])
            out.append(
                LabeledSample(i, POSITIVE, g, encode_delta(gts[g], proposals[i]))
            )
        elif neg_lo <= best_iou[i] < neg_hi:
            out.append(LabeledSample(i, NEGATIVE))
        else:
            out.append(LabeledSample(i, IGNORE))
    return out


def _top_by_loss(entries: list[tuple[int, float]], k: int) -> list[int]:
    # stable: descending loss, ties toward the lower sample index
    ranked = sorted(entries, key=lambda e: (-e[1], e[0]))
    return [idx for idx, _ in ranked[:k]]


def ohem_select(
    samples: Sequence[LabeledSample],
    per_sample_loss: np.ndarray,
    cfg: OhemConfig,
) -> list[int]:
    """Pick the hardest samples, mined per class to keep a 1:1 balance.

    Takes the top-min(k, #pos) positives and top-min(k, #neg) negatives by
    descending loss with k = batch_size/2; ties break toward the lower sample
    index and ignore-labeled samples are never selected. Output lists positive
    indices first, then negatives, each in descending-loss order. Classes are
    capped independently; a short class is never padded with the other one.
    """
    losses = np.asarray(per_sample_loss, dtype=np.float64)
    if losses.shape != (len(samples),):
        raise ValueError(
            f"per_sample_loss must align with samples: {losses.shape} vs {len(samples)}"
        )
    if not np.all(np.isfinite(losses)):
        raise ValueError("non-finite per-sample losses")
    pos = [(s.index, float(l)) for s, l in zip(samples, losses) if s.label == POSITIVE]
    neg = [(s.index, float(l)) for s, l in zip(samples, losses) if s.label == NEGATIVE]
    if not pos and not neg:
        raise ValueError("untrainable batch: no positive and no negative samples")
    k = cfg.per_class
    return _top_by_loss(pos, k) + _top_by_loss(neg, k)


def balanced_random_select(
    samples: Sequence[LabeledSample],
    rng: np.random.Generator,
    cfg: OhemConfig,
) -> list[int]:
    """Random balanced sampling; the fallback when hard mining is disabled.

    Same per-class caps as :func:`ohem_select` but drawn uniformly without
    replacement instead of by loss rank.
    """
    pos = [s.index for s in samples if s.label == POSITIVE]
    neg = [s.index for s in samples if s.label == NEGATIVE]
    if not pos and not neg:
        raise ValueError("untrainable batch: no positive and no negative samples")
    k = cfg.per_class
    out: list[int] = []
    for group in (pos, neg):
        if len(group) <= k:
            out.extend(group)
        else:
            picks = rng.choice(len(group), size=k, replace=False)
            out.extend(group[int(i)] for i in sorted(picks))
    return out
