"""Exact box arithmetic: IoU, anchor grids, delta coding, clipping, NMS.

Boxes use the corner convention (x1, y1, x2, y2) with
area = (x2 - x1) * (y2 - y1); there is no "+1" pixel correction anywhere.
All operations are pure functions on immutable values and safe for
unrestricted parallel use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "AnchorSpec",
    "Box",
    "Delta",
    "Detection",
    "boxes_to_array",
    "clip_box",
    "decode_delta",
    "decode_deltas",
    "encode_delta",
    "encode_deltas",
    "generate_anchors",
    "iou",
    "iou_matrix",
    "nms",
    "nms_indices",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in image coordinates (pixels)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"box corners out of order: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)


@dataclass(frozen=True)
class Detection:
    """A scored box; ``scale_id`` indexes the pyramid scale that produced it."""

    box: Box
    score: float
    scale_id: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "score", float(self.score))
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score outside [0, 1]: {self.score}")


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor grid layout: one anchor per (cell, scale, ratio) triple.

    ``scales`` are side lengths in pixels; ``aspect_ratios`` are height/width
    ratios. Anchor area is preserved across ratios: w = s/sqrt(r), h = s*sqrt(r).
    """

    base_stride: int
    scales: tuple[float, ...]
    aspect_ratios: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.base_stride <= 0:
            raise ValueError(f"base_stride must be positive, got {self.base_stride}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be non-empty and positive: {self.scales}")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError(f"aspect_ratios must be non-empty and positive: {self.aspect_ratios}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass(frozen=True)
class Delta:
    """Box offsets in the center/log-size parameterization.

    dx, dy are center offsets normalized by the reference width/height;
    dw, dh are log-space size ratios.
    """

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self) -> None:
        for name in ("dx", "dy", "dw", "dh"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite delta component {name}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack boxes into an (N, 4) float64 array of corners."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when the union has zero area."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (N, 4) and (M, 4) corner arrays; zero-union pairs give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out


def generate_anchors(spec: AnchorSpec, feature_w: int, feature_h: int) -> list[Box]:
    """Tile anchors over a feature grid.

    The anchor for cell (i, j), scale s, ratio r is centered at
    ((i + 0.5) * stride, (j + 0.5) * stride) with width s/sqrt(r) and height
    s*sqrt(r). Ordering is row-major over cells, then scales, then ratios, so
    the flat index is ((j * W + i) * len(scales) + si) * len(ratios) + ri.
    """
    if feature_w < 1 or feature_h < 1:
        raise ValueError(f"feature grid must be at least 1x1, got {feature_w}x{feature_h}")
    shapes = [
        (s / math.sqrt(r), s * math.sqrt(r))
        for s in spec.scales
        for r in spec.aspect_ratios
    ]
    out: list[Box] = []
    for j in range(feature_h):
        cy = (j + 0.5) * spec.base_stride
        for i in range(feature_w):
            cx = (i + 0.5) * spec.base_stride
            for w, h in shapes:
                out.append(Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0))
    return out


def _require_positive_size(b: Box, role: str) -> None:
    if b.width <= 0.0 or b.height <= 0.0:
        raise ValueError(f"degenerate {role} box (zero width or height): {b.as_tuple()}")


def encode_delta(gt: Box, anchor: Box) -> Delta:
    """Encode a target box relative to a reference anchor."""
    _require_positive_size(anchor, "reference")
    _require_positive_size(gt, "target")
    ax, ay = anchor.center
    gx, gy = gt.center
    return Delta(
        (gx - ax) / anchor.width,
        (gy - ay) / anchor.height,
        math.log(gt.width / anchor.width),
        math.log(gt.height / anchor.height),
    )


def decode_delta(d: Delta, anchor: Box) -> Box:
    """Apply a delta to a reference anchor; exact inverse of encode_delta."""
    _require_positive_size(anchor, "reference")
    ax, ay = anchor.center
    cx = ax + d.dx * anchor.width
    cy = ay + d.dy * anchor.height
    w = anchor.width * math.exp(d.dw)
    h = anchor.height * math.exp(d.dh)
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def encode_deltas(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized encode_delta on (N, 4) corner arrays; returns (N, 4) deltas."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("degenerate box in batched delta encoding")
    ax = (anchors[:, 0] + anchors[:, 2]) / 2.0
    ay = (anchors[:, 1] + anchors[:, 3]) / 2.0
    gx = (gts[:, 0] + gts[:, 2]) / 2.0
    gy = (gts[:, 1] + gts[:, 3]) / 2.0
    return np.stack(
        [(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_deltas(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized decode_delta; returns (N, 4) corner boxes."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("degenerate reference box in batched delta decoding")
    ax = (anchors[:, 0] + anchors[:, 2]) / 2.0
    ay = (anchors[:, 1] + anchors[:, 3]) / 2.0
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression on raw (N, 4) corner and (N,) score arrays.

    Returns kept row indices, highest score first; score ties break toward the
    smaller row index and suppression uses strict IoU > threshold.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold outside [0, 1]: {iou_threshold}")
    n = len(scores)
    if n == 0:
        return []
    # lexsort: last key is primary, so sort by -score then original index
    order = np.lexsort((np.arange(n), -np.asarray(scores, dtype=np.float64)))
    boxes = np.asarray(boxes, dtype=np.float64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    suppressed = np.zeros(n, dtype=bool)
    keep: list[int] = []
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        ix1 = np.maximum(boxes[idx, 0], boxes[:, 0])
        iy1 = np.maximum(boxes[idx, 1], boxes[:, 1])
        ix2 = np.minimum(boxes[idx, 2], boxes[:, 2])
        iy2 = np.minimum(boxes[idx, 3], boxes[:, 3])
        inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
        union = areas[idx] + areas - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            overlap = np.where(union > 0.0, inter / union, 0.0)
        suppressed |= overlap > iou_threshold
        suppressed[idx] = True  # already kept; keep it out of later passes
    return keep


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-score remaining detection and discards any
    remaining detection with IoU strictly above the threshold against it.
    Score ties break toward the smaller original index; output is sorted by
    descending score.
    """
    if not dets:
        if not (0.0 <= iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold outside [0, 1]: {iou_threshold}")
        return []
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]


def clip_box(b: Box, w: int, h: int) -> Box:
    """Clamp a box to the [0, w] x [0, h] window."""
    if w < 1 or h < 1:
        raise ValueError(f"clip window must be at least 1x1, got {w}x{h}")
    return Box(
        min(max(b.x1, 0.0), float(w)),
        min(max(b.y1, 0.0), float(h)),
        min(max(b.x2, 0.0), float(w)),
        min(max(b.y2, 0.0), float(h)),
    )
