"""Multi-scale support: image resizing, training-scale sampling, cross-scale merge."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .geometry import Box, Detection, nms

__all__ = ["ScaleSet", "merge_multiscale", "pick_training_scale", "resize_image"]

MIN_IMAGE_DIM = 8


@dataclass(frozen=True)
class ScaleSet:
    """Resize factors applied to the original image, sorted ascending."""

    scales: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.scales:
            raise ValueError("scale set must be non-empty")
        if any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive: {self.scales}")
        if list(self.scales) != sorted(self.scales):
            raise ValueError(f"scales must be sorted ascending: {self.scales}")

    def __len__(self) -> int:
        return len(self.scales)


def resize_image(image: np.ndarray, scale: float, stride: int = 4) -> np.ndarray:
    """Bilinear resize by ``scale``; output dims snap down to a stride multiple.

    Output dims are round(input * scale) floored to the nearest multiple of
    ``stride``; dims below 8 px are an error. Sampling uses half-pixel centers
    with edge replication.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = image.shape
    out_h = int(math.floor(h * scale + 0.5)) // stride * stride
    out_w = int(math.floor(w * scale + 0.5)) // stride * stride
    if out_h < MIN_IMAGE_DIM or out_w < MIN_IMAGE_DIM:
        raise ValueError(
            f"resized image too small: {out_w}x{out_h} from {w}x{h} at scale {scale}"
        )
    if (out_h, out_w) == (h, w):
        return image.astype(np.float64, copy=True)

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = (ys - y0f)[:, None]
    wx = (xs - x0f)[None, :]
    y0 = np.clip(y0f, 0, h - 1).astype(np.int64)
    y1 = np.clip(y0f + 1, 0, h - 1).astype(np.int64)
    x0 = np.clip(x0f, 0, w - 1).astype(np.int64)
    x1 = np.clip(x0f + 1, 0, w - 1).astype(np.int64)
    img = image.astype(np.float64)
    top = (1.0 - wx) * img[y0[:, None], x0[None, :]] + wx * img[y0[:, None], x1[None, :]]
    bot = (1.0 - wx) * img[y1[:, None], x0[None, :]] + wx * img[y1[:, None], x1[None, :]]
    return (1.0 - wy) * top + wy * bot


def pick_training_scale(rng: np.random.Generator, scale_set: ScaleSet) -> float:
    """Uniform draw from the scale set; deterministic given the generator state."""
    return scale_set.scales[int(rng.integers(len(scale_set)))]


def merge_multiscale(
    per_scale_dets: Sequence[tuple[float, Sequence[Detection]]],
    iou_threshold: float = 0.3,
) -> list[Detection]:
    """Map per-scale detections back to the original frame and suppress overlaps.

    Each detection's coordinates are divided by the scale its ``scale_id``
    indexes in ``per_scale_dets``; the union is then reduced with NMS at
    ``iou_threshold``. A ``scale_id`` outside the table is an error.
    """
    scales = [s for s, _ in per_scale_dets]
    if any(s <= 0 for s in scales):
        raise ValueError(f"scales must be positive: {scales}")
    union: list[Detection] = []
    for _, dets in per_scale_dets:
        for det in dets:
            if not (0 <= det.scale_id < len(scales)):
                raise ValueError(f"unknown scale id {det.scale_id} (have {len(scales)} scales)")
            s = scales[det.scale_id]
            b = det.box
            union.append(
                replace(det, box=Box(b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s))
            )
    return nms(union, iou_threshold)
