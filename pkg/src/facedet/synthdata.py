"""Seeded synthetic blob-face scenes with exact ground truth.

Faces render as filled ellipses carrying two darker eye dots and a mouth arc;
distractors are structure-free ellipses and rectangles drawn from the same
intensity range, so the background class contains genuinely hard negatives.
Everything is a pure function of (seed, index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import (
    Ellipse,
    FormatError,
    format_box_annotations,
    format_ellipse_annotations,
    parse_box_annotations,
)
from .geometry import Box, iou

__all__ = [
    "DatasetManifest",
    "SceneSpec",
    "generate_scene",
    "load_dataset",
    "read_pgm",
    "write_dataset",
    "write_pgm",
]

BG_LEVEL = 0.25
FACE_LEVEL = 0.8
PART_LEVEL = 0.15
DISTRACTOR_RANGE = (0.55, 0.95)
MAX_PLACE_TRIES = 200
MAX_OVERLAP_IOU = 0.2

# placement snaps to a dyadic 1/32 px grid: centers, half extents, and the
# center/corner conversions in the annotation formats then round-trip exactly
PLACEMENT_GRID = 32.0


@dataclass(frozen=True)
class SceneSpec:
    image_w: int = 64
    image_h: int = 64
    n_faces: tuple[int, int] = (1, 3)
    face_size: tuple[float, float] = (12.0, 32.0)
    noise_sigma: float = 0.02
    distractor_count: tuple[int, int] = (0, 3)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_w < 16 or self.image_h < 16:
            raise ValueError(f"image too small: {self.image_w}x{self.image_h}")
        if not (0 <= self.n_faces[0] <= self.n_faces[1]):
            raise ValueError(f"bad face-count range: {self.n_faces}")
        if not (8.0 <= self.face_size[0] <= self.face_size[1]):
            raise ValueError(f"face sizes must satisfy 8 <= min <= max: {self.face_size}")
        if self.face_size[1] > min(self.image_w, self.image_h):
            raise ValueError("faces must fit inside the image")
        if not (0 <= self.distractor_count[0] <= self.distractor_count[1]):
            raise ValueError(f"bad distractor range: {self.distractor_count}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative: {self.noise_sigma}")
        # faces must stay detectable: keep contrast at >= 4 sigma
        if 4.0 * self.noise_sigma > FACE_LEVEL - BG_LEVEL:
            raise ValueError(
                f"noise_sigma {self.noise_sigma} too large for the "
                f"{FACE_LEVEL - BG_LEVEL} face/background contrast"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative: {self.seed}")


def _snap(v: float) -> float:
    return round(float(v) * PLACEMENT_GRID) / PLACEMENT_GRID


def _place_box(
    rng: np.random.Generator,
    spec: SceneSpec,
    existing: Sequence[Box],
    size_range: tuple[float, float],
) -> Box:
    for _ in range(MAX_PLACE_TRIES):
        h = _snap(rng.uniform(size_range[0], size_range[1]))
        w = _snap(h * rng.uniform(0.7, 0.95))
        x1 = float(np.floor(rng.uniform(0.0, spec.image_w - w) * PLACEMENT_GRID)) / PLACEMENT_GRID
        y1 = float(np.floor(rng.uniform(0.0, spec.image_h - h) * PLACEMENT_GRID)) / PLACEMENT_GRID
        box = Box(x1, y1, x1 + w, y1 + h)
        if all(iou(box, other) < MAX_OVERLAP_IOU for other in existing):
            return box
    raise RuntimeError(
        f"could not place an object after {MAX_PLACE_TRIES} tries; scene too crowded"
    )


def _grids(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(spec.image_h)[:, None] + 0.5
    xs = np.arange(spec.image_w)[None, :] + 0.5
    return xs, ys


def _ellipse_mask(xs, ys, cx, cy, half_w, half_h) -> np.ndarray:
    return ((xs - cx) / half_w) ** 2 + ((ys - cy) / half_h) ** 2 <= 1.0


def _draw_face(img: np.ndarray, xs, ys, box: Box) -> None:
    cx, cy = box.center
    hw, hh = box.width / 2.0, box.height / 2.0
    face = _ellipse_mask(xs, ys, cx, cy, hw, hh)
    img[face] = FACE_LEVEL
    eye_r = max(0.8, 0.16 * hw)
    for ex in (cx - 0.44 * hw, cx + 0.44 * hw):
        eye = ((xs - ex) ** 2 + (ys - (cy - 0.36 * hh)) ** 2) <= eye_r**2
        img[eye & face] = PART_LEVEL
    # mouth: the lower arc of an off-center ellipse band
    d2 = ((xs - cx) / (0.60 * hw)) ** 2 + ((ys - (cy + 0.16 * hh)) / (0.56 * hh)) ** 2
    mouth = (d2 >= 0.55) & (d2 <= 1.0) & (ys > cy + 0.30 * hh) & face
    img[mouth] = PART_LEVEL


def _draw_distractor(img: np.ndarray, xs, ys, box: Box, kind: int, level: float) -> None:
    if kind == 0:
        cx, cy = box.center
        mask = _ellipse_mask(xs, ys, cx, cy, box.width / 2.0, box.height / 2.0)
    else:
        mask = (xs >= box.x1) & (xs <= box.x2) & (ys >= box.y1) & (ys <= box.y2)
    img[mask] = level


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[Box]]:
    """Render scene ``index``: grayscale image in [0, 1] plus exact face boxes.

    Ground-truth boxes are the analytic tight bounds of each face ellipse.
    Bit-identical output for identical (spec.seed, index).
    """
    if index < 0:
        raise ValueError(f"scene index must be non-negative: {index}")
    rng = np.random.default_rng([spec.seed, index])
    xs, ys = _grids(spec)
    img = np.full((spec.image_h, spec.image_w), BG_LEVEL)

    n_faces = int(rng.integers(spec.n_faces[0], spec.n_faces[1] + 1))
    faces: list[Box] = []
    for _ in range(n_faces):
        faces.append(_place_box(rng, spec, faces, spec.face_size))

    n_distract = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
    placed = list(faces)
    for _ in range(n_distract):
        box = _place_box(rng, spec, placed, spec.face_size)
        placed.append(box)
        kind = int(rng.integers(2))
        level = float(rng.uniform(*DISTRACTOR_RANGE))
        _draw_distractor(img, xs, ys, box, kind, level)

    for box in faces:
        _draw_face(img, xs, ys, box)

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), faces


# -- portable graymap I/O ------------------------------------------------------


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary P5 at maxval 255; values quantize by rounding."""
    h, w = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read binary P5 back to float64 in [0, 1]."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise FormatError(1, f"not a binary P5 file: {path}")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(None, f"truncated P5 header in {path}")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(None, f"unsupported P5 maxval {maxval} in {path}")
    raster = blob[pos : pos + w * h]
    if len(raster) != w * h:
        raise FormatError(None, f"truncated P5 raster in {path}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# -- dataset writer -------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    names: tuple[str, ...]
    face_counts: tuple[int, ...]
    box_annotations: Path
    ellipse_annotations: Path

    @property
    def total_faces(self) -> int:
        return sum(self.face_counts)


def _face_ellipse(box: Box) -> Ellipse:
    # angle-0 ellipse whose axis radii are the half extents; converting back
    # to a box is then exact (cos 0 and sin 0 are exact in IEEE arithmetic)
    cx, cy = box.center
    return Ellipse(box.width / 2.0, box.height / 2.0, 0.0, cx, cy)


def write_dataset(spec: SceneSpec, n_images: int, out_dir: Path) -> DatasetManifest:
    """Render scenes 0..n_images-1 into P5 files plus both annotation formats.

    The box-annotation file round-trips the exact ground truth; the ellipse
    file encodes each face as an axis-aligned ellipse.
    """
    if n_images < 0:
        raise ValueError(f"n_images must be non-negative: {n_images}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    box_entries = []
    ellipse_entries = []
    face_counts = []
    for i in range(n_images):
        image, gts = generate_scene(spec, i)
        name = f"img_{i:05d}.pgm"
        write_pgm(out_dir / name, image)
        names.append(name)
        face_counts.append(len(gts))
        box_entries.append((name, gts))
        ellipse_entries.append((name, [_face_ellipse(b) for b in gts]))
    box_path = out_dir / "annotations_boxes.txt"
    ellipse_path = out_dir / "annotations_ellipses.txt"
    box_path.write_text(format_box_annotations(box_entries))
    ellipse_path.write_text(format_ellipse_annotations(ellipse_entries))
    manifest = DatasetManifest(
        root=out_dir,
        names=tuple(names),
        face_counts=tuple(face_counts),
        box_annotations=box_path,
        ellipse_annotations=ellipse_path,
    )
    (out_dir / "manifest.json").write_text(
        json.dumps(
            {
                "images": names,
                "face_counts": face_counts,
                "box_annotations": box_path.name,
                "ellipse_annotations": ellipse_path.name,
                "spec": {
                    "image_w": spec.image_w,
                    "image_h": spec.image_h,
                    "n_faces": list(spec.n_faces),
                    "face_size": list(spec.face_size),
                    "noise_sigma": spec.noise_sigma,
                    "distractor_count": list(spec.distractor_count),
                    "seed": spec.seed,
                },
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return manifest


def load_dataset(root: Path) -> list[tuple[str, np.ndarray, list[Box]]]:
    """Load (name, image, ground truths) triples from a written dataset."""
    root = Path(root)
    box_path = root / "annotations_boxes.txt"
    if not box_path.exists():
        raise FileNotFoundError(f"no annotations_boxes.txt under {root}")
    entries = parse_box_annotations(box_path.read_text())
    return [(name, read_pgm(root / name), boxes) for name, boxes in entries.items()]
