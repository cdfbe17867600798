"""Benchmark scoring: ellipse-annotation parsing, greedy detection matching,
discrete/continuous ROC sweeps, and precision-recall with average precision.

File formats handled here:

* ellipse annotations (read/write): per image a name line, an integer count
  line, then count lines of six whitespace-separated reals
  ``major_radius minor_radius angle cx cy score`` (the trailing score is
  ignored for ground truth);
* detection files (read/write): name line, count line, then
  ``x y w h score`` per detection in corner+size convention;
* box annotations (read/write): ``path`` line, count line K, then K lines of
  ``x y w h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, Detection, boxes_to_array, iou_matrix

__all__ = [
    "Ellipse",
    "FormatError",
    "PrPoint",
    "RocPoint",
    "continuous_roc",
    "discrete_roc",
    "ellipse_to_box",
    "format_detections",
    "format_ellipse_annotations",
    "format_box_annotations",
    "match_detections",
    "parse_box_annotations",
    "parse_detections",
    "parse_ellipse_annotations",
    "pr_curve_ap",
    "pr_csv",
    "roc_csv",
    "tpr_at_fp",
]


class FormatError(ValueError):
    """Malformed annotation or detection text; carries the 1-based line number."""

    def __init__(self, line: Optional[int], message: str):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Ellipse:
    major_axis_radius: float
    minor_axis_radius: float
    angle: float  # radians
    center_x: float
    center_y: float

    def __post_init__(self) -> None:
        if self.major_axis_radius <= 0 or self.minor_axis_radius <= 0:
            raise ValueError(
                f"ellipse radii must be positive: "
                f"{self.major_axis_radius}, {self.minor_axis_radius}"
            )


@dataclass(frozen=True)
class RocPoint:
    false_positives: int
    true_positive_rate: float


@dataclass(frozen=True)
class PrPoint:
    recall: float
    precision: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.recall <= 1.0 and 0.0 <= self.precision <= 1.0):
            raise ValueError(f"recall/precision outside [0, 1]: {self.recall}, {self.precision}")


# -- text formats -------------------------------------------------------------


def _lines(text: str) -> list[str]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


class _Cursor:
    def __init__(self, text: str):
        self.lines = _lines(text)
        self.pos = 0

    def done(self) -> bool:
        return self.pos >= len(self.lines)

    @property
    def lineno(self) -> int:
        return self.pos + 1

    def next(self, what: str) -> tuple[str, int]:
        if self.done():
            raise FormatError(self.pos, f"unexpected end of file, expected {what}")
        line = self.lines[self.pos].strip()
        n = self.lineno
        self.pos += 1
        if not line:
            raise FormatError(n, f"blank line where {what} expected")
        return line, n

    def count(self) -> tuple[int, int]:
        line, n = self.next("a count")
        try:
            value = int(line)
        except ValueError:
            raise FormatError(n, f"malformed count: {line!r}") from None
        if value < 0:
            raise FormatError(n, f"negative count: {value}")
        return value, n


def _floats(line: str, n: int, expected: int) -> list[float]:
    parts = line.split()
    if len(parts) != expected:
        raise FormatError(n, f"expected {expected} fields, got {len(parts)}")
    out = []
    for p in parts:
        try:
            out.append(float(p))
        except ValueError:
            raise FormatError(n, f"non-numeric field: {p!r}") from None
    return out


def parse_ellipse_annotations(text: str) -> dict[str, list[Ellipse]]:
    """Parse ellipse ground-truth annotations keyed by image name."""
    cur = _Cursor(text)
    out: dict[str, list[Ellipse]] = {}
    while not cur.done():
        name, n = cur.next("an image name")
        if name in out:
            raise FormatError(n, f"duplicate image entry: {name}")
        count, _ = cur.count()
        faces = []
        for _ in range(count):
            line, ln = cur.next("an ellipse line")
            major, minor, angle, cx, cy, _score = _floats(line, ln, 6)
            try:
                faces.append(Ellipse(major, minor, angle, cx, cy))
            except ValueError as e:
                raise FormatError(ln, str(e)) from None
        out[name] = faces
    return out


def format_ellipse_annotations(entries: Sequence[tuple[str, Sequence[Ellipse]]]) -> str:
    lines = []
    for name, faces in entries:
        lines.append(name)
        lines.append(str(len(faces)))
        for e in faces:
            lines.append(
                f"{e.major_axis_radius!r} {e.minor_axis_radius!r} "
                f"{e.angle!r} {e.center_x!r} {e.center_y!r} 1"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str) -> dict[str, list[Detection]]:
    """Parse detection files: name, count, then ``x y w h score`` lines."""
    cur = _Cursor(text)
    out: dict[str, list[Detection]] = {}
    while not cur.done():
        name, n = cur.next("an image name")
        if name in out:
            raise FormatError(n, f"duplicate image entry: {name}")
        count, _ = cur.count()
        dets = []
        for _ in range(count):
            line, ln = cur.next("a detection line")
            x, y, w, h, score = _floats(line, ln, 5)
            try:
                dets.append(Detection(Box(x, y, x + w, y + h), score))
            except ValueError as e:
                raise FormatError(ln, str(e)) from None
        out[name] = dets
    return out


def format_detections(entries: Sequence[tuple[str, Sequence[Detection]]]) -> str:
    lines = []
    for name, dets in entries:
        lines.append(name)
        lines.append(str(len(dets)))
        for d in dets:
            b = d.box
            lines.append(
                f"{b.x1!r} {b.y1!r} {b.width!r} {b.height!r} {float(d.score)!r}"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def parse_box_annotations(text: str) -> dict[str, list[Box]]:
    """Parse box annotations: path, count K, then K lines of ``x y w h``."""
    cur = _Cursor(text)
    out: dict[str, list[Box]] = {}
    while not cur.done():
        name, n = cur.next("an image path")
        if name in out:
            raise FormatError(n, f"duplicate image entry: {name}")
        count, _ = cur.count()
        boxes = []
        for _ in range(count):
            line, ln = cur.next("a box line")
            x, y, w, h = _floats(line, ln, 4)
            if w < 0 or h < 0:
                raise FormatError(ln, f"negative box size: {w} x {h}")
            boxes.append(Box(x, y, x + w, y + h))
        out[name] = boxes
    return out


def format_box_annotations(entries: Sequence[tuple[str, Sequence[Box]]]) -> str:
    lines = []
    for name, boxes in entries:
        lines.append(name)
        lines.append(str(len(boxes)))
        for b in boxes:
            lines.append(f"{b.x1!r} {b.y1!r} {b.width!r} {b.height!r}")
    return "\n".join(lines) + ("\n" if lines else "")


# -- geometry bridge ----------------------------------------------------------


def ellipse_to_box(e: Ellipse) -> Box:
    """Tight axis-aligned bounding box of a rotated ellipse.

    Half extents are sqrt(a^2 cos^2 t + b^2 sin^2 t) horizontally and
    sqrt(a^2 sin^2 t + b^2 cos^2 t) vertically; hypot keeps the axis-aligned
    case exact.
    """
    a, b = e.major_axis_radius, e.minor_axis_radius
    c, s = math.cos(e.angle), math.sin(e.angle)
    half_w = math.hypot(a * c, b * s)
    half_h = math.hypot(a * s, b * c)
    return Box(e.center_x - half_w, e.center_y - half_h,
               e.center_x + half_w, e.center_y + half_h)


# -- matching and curves -------------------------------------------------------


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Box], iou_threshold: float
) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching in descending score order.

    Each detection takes the highest-IoU still-unmatched ground truth provided
    that IoU reaches the threshold; each gt matches at most once. Returns
    (det_index, gt_index, iou) triples in processing order; indices refer to
    the input sequences.
    """
    if not dets or not gts:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    overlaps = iou_matrix(
        boxes_to_array([d.box for d in dets]), boxes_to_array(gts)
    )
    taken = np.zeros(len(gts), dtype=bool)
    out = []
    for i in order:
        row = np.where(taken, -1.0, overlaps[i])
        g = int(row.argmax())
        v = float(row[g])
        if v >= iou_threshold:
            taken[g] = True
            out.append((i, g, v))
    return out


def _flatten_matches(
    samples: Sequence[tuple[Sequence[Detection], Sequence[Box]]],
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Collapse a dataset into per-detection (score, is_match, iou) plus gt total.

    Greedy score-ordered matching is prefix-stable: restricting to the top-k
    detections gives exactly the matches of the top-k prefix, so one matching
    pass supports the whole threshold sweep.
    """
    scores, is_tp, ious = [], [], []
    total_gts = 0
    for dets, gts in samples:
        total_gts += len(gts)
        matched = {d: v for d, _, v in match_detections(dets, gts, iou_threshold)}
        for i, det in enumerate(dets):
            scores.append(det.score)
            is_tp.append(i in matched)
            ious.append(matched.get(i, 0.0))
    return (
        np.array(scores, dtype=np.float64),
        np.array(is_tp, dtype=bool),
        np.array(ious, dtype=np.float64),
        total_gts,
    )


def _sweep(scores: np.ndarray, weights: np.ndarray, is_tp: np.ndarray, total: int) -> list[RocPoint]:
    if scores.size == 0:
        return [RocPoint(0, 0.0)]
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    cum_tp = np.cumsum(weights[order])
    cum_fp = np.cumsum(~is_tp[order])
    boundary = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    return [
        RocPoint(int(cum_fp[i]), float(cum_tp[i]) / total) for i in boundary
    ]


def discrete_roc(
    samples: Sequence[tuple[Sequence[Detection], Sequence[Box]]],
    iou_threshold: float = 0.5,
) -> list[RocPoint]:
    """Threshold sweep over all distinct scores; TPR counts matched gts."""
    scores, is_tp, _, total = _flatten_matches(samples, iou_threshold)
    if total == 0:
        raise ValueError("cannot build a ROC curve with zero ground truths")
    return _sweep(scores, is_tp.astype(np.float64), is_tp, total)


def continuous_roc(
    samples: Sequence[tuple[Sequence[Detection], Sequence[Box]]],
    iou_threshold: float = 0.5,
) -> list[RocPoint]:
    """Same sweep but each matched gt contributes its IoU instead of 1."""
    scores, is_tp, ious, total = _flatten_matches(samples, iou_threshold)
    if total == 0:
        raise ValueError("cannot build a ROC curve with zero ground truths")
    return _sweep(scores, ious, is_tp, total)


def pr_curve_ap(
    samples: Sequence[tuple[Sequence[Detection], Sequence[Box]]],
    iou_threshold: float = 0.5,
) -> tuple[list[PrPoint], float]:
    """Global precision/recall at every rank plus average precision.

    AP is the area under the precision envelope over recall (every-point
    interpolation: at each recall level the precision is the maximum achieved
    at that recall or higher). Depends only on the score ranking.
    """
    scores, is_tp, _, total = _flatten_matches(samples, iou_threshold)
    if total == 0:
        raise ValueError("cannot compute average precision with zero ground truths")
    if scores.size == 0:
        return [], 0.0
    order = np.argsort(-scores, kind="stable")
    tp = is_tp[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, tp.size + 1, dtype=np.float64)
    precision = cum_tp / ranks
    recall = cum_tp / total
    points = [PrPoint(float(r), float(p)) for r, p in zip(recall, precision)]
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for k in range(tp.size):
        ap += (recall[k] - prev_r) * envelope[k]
        prev_r = recall[k]
    return points, float(ap)


def tpr_at_fp(points: Sequence[RocPoint], max_fp: int) -> float:
    """Best true-positive rate reached at or below ``max_fp`` false positives."""
    eligible = [p.true_positive_rate for p in points if p.false_positives <= max_fp]
    return max(eligible) if eligible else 0.0


# -- delimited output ----------------------------------------------------------


def roc_csv(points: Sequence[RocPoint]) -> str:
    lines = ["false_positives,true_positive_rate"]
    lines += [f"{p.false_positives},{p.true_positive_rate!r}" for p in points]
    return "\n".join(lines) + "\n"


def pr_csv(points: Sequence[PrPoint]) -> str:
    lines = ["recall,precision"]
    lines += [f"{p.recall!r},{p.precision!r}" for p in points]
    return "\n".join(lines) + "\n"
