"""Run configuration: one flat dataclass, a diff-friendly key=value file format.

Every hyperparameter lives here with its default. ``parse_config`` and
``serialize_config`` round-trip exactly (floats use repr), so a written config
re-parses to an identical value and the digest of a config is stable.
"""

from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, fields, replace

__all__ = [
    "Config",
    "ConfigError",
    "apply_overrides",
    "config_digest",
    "parse_config",
    "serialize_config",
    "validate_config",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # reproducibility
    seed: int = 0
    # synthetic data
    image_w: int = 64
    image_h: int = 64
    n_faces_min: int = 1
    n_faces_max: int = 3
    face_min: float = 12.0
    face_max: float = 32.0
    noise_sigma: float = 0.02
    distractors_min: int = 0
    distractors_max: int = 3
    # anchor grid
    anchor_stride: int = 4
    anchor_scales: tuple[float, ...] = (8.0, 16.0, 32.0)
    anchor_ratios: tuple[float, ...] = (1.0, 1.3)
    # loss weights and center update rate
    lam: float = 1.0
    mu: float = 0.01
    center_alpha: float = 0.5
    # assignment thresholds
    anchor_pos_iou: float = 0.7
    anchor_neg_iou: float = 0.3
    prop_pos_iou: float = 0.5
    prop_neg_lo: float = 0.1
    prop_neg_hi: float = 0.5
    # hard-example mining
    rpn_batch: int = 256
    head_batch: int = 128
    ohem: bool = True
    ohem_rpn: bool = True
    ohem_rank: str = "cls"  # "cls" or "cls+reg"
    # proposal generation
    proposal_cap: int = 2000
    nms_proposals: float = 0.7
    nms_final: float = 0.3
    min_proposal_size: float = 1.0
    add_gt_proposals: bool = True
    train_proposal_cap: int = 256  # post-NMS pool for mining; 0 = unlimited
    infer_proposal_cap: int = 300  # post-NMS refinement budget at test time
    # network shape
    trunk_channels: tuple[int, ...] = (8, 16)
    rpn_channels: int = 16
    roi_size: int = 6
    hidden_dim: int = 64
    feature_dim: int = 32
    # optimization
    learning_rate: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 10.0
    steps: int = 2000
    multiscale_train: bool = True
    scales: tuple[float, ...] = (0.5, 1.0, 2.0)
    # inference / evaluation
    score_threshold: float = 0.5
    tpr_fp_count: int = 2000


_HINTS = typing.get_type_hints(Config)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, raw: str):
    hint = _HINTS.get(name)
    if hint is None:
        raise ConfigError(f"unknown config key: {name}")
    raw = raw.strip()
    try:
        if hint is bool:
            if raw not in ("true", "false"):
                raise ValueError("expected true/false")
            return raw == "true"
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        origin = typing.get_origin(hint)
        if origin is tuple:
            item = typing.get_args(hint)[0]
            parts = [p for p in raw.split(",") if p.strip() != ""]
            return tuple(item(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r} ({e})") from None
    raise ConfigError(f"unsupported config field type for {name}")  # pragma: no cover


def serialize_config(cfg: Config) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in fields(Config)]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse key=value lines ('#' starts a comment) on top of ``base`` defaults."""
    cfg = base if base is not None else Config()
    updates = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        updates[key] = _coerce(key, raw)
    return replace(cfg, **updates)


def apply_overrides(cfg: Config, pairs: dict[str, str]) -> Config:
    updates = {key: _coerce(key, raw) for key, raw in pairs.items()}
    return replace(cfg, **updates)


def validate_config(cfg: Config) -> Config:
    """Reject invalid combinations; error messages name the offending field."""

    def bad(field: str, why: str) -> ConfigError:
        return ConfigError(f"config field {field}: {why}")

    if cfg.seed < 0:
        raise bad("seed", "must be non-negative")
    if cfg.anchor_stride != 4:
        raise bad("anchor_stride", "must be 4 (the trunk downsamples twice by 2)")
    for name in ("image_w", "image_h"):
        v = getattr(cfg, name)
        if v < 16 or v % cfg.anchor_stride != 0:
            raise bad(name, f"must be >= 16 and a multiple of anchor_stride, got {v}")
    if not (0 <= cfg.n_faces_min <= cfg.n_faces_max):
        raise bad("n_faces_min", "need 0 <= n_faces_min <= n_faces_max")
    if not (8.0 <= cfg.face_min <= cfg.face_max):
        raise bad("face_min", "need 8 <= face_min <= face_max")
    if cfg.face_max > min(cfg.image_w, cfg.image_h):
        raise bad("face_max", "faces must fit inside the image")
    if not (0 <= cfg.distractors_min <= cfg.distractors_max):
        raise bad("distractors_min", "need 0 <= distractors_min <= distractors_max")
    if cfg.noise_sigma < 0:
        raise bad("noise_sigma", "must be non-negative")
    if not cfg.anchor_scales or any(s <= 0 for s in cfg.anchor_scales):
        raise bad("anchor_scales", "must be non-empty and positive")
    if not cfg.anchor_ratios or any(r <= 0 for r in cfg.anchor_ratios):
        raise bad("anchor_ratios", "must be non-empty and positive")
    if cfg.lam < 0:
        raise bad("lam", "must be non-negative")
    if cfg.mu < 0:
        raise bad("mu", "must be non-negative")
    if not (0.0 < cfg.center_alpha <= 1.0):
        raise bad("center_alpha", "must lie in (0, 1]")
    for name in ("anchor_pos_iou", "anchor_neg_iou", "prop_pos_iou", "prop_neg_lo",
                 "prop_neg_hi", "nms_proposals", "nms_final", "score_threshold"):
        v = getattr(cfg, name)
        if not (0.0 <= v <= 1.0):
            raise bad(name, f"must lie in [0, 1], got {v}")
    if cfg.anchor_neg_iou > cfg.anchor_pos_iou:
        raise bad("anchor_neg_iou", "must not exceed anchor_pos_iou")
    if not (cfg.prop_neg_lo < cfg.prop_neg_hi <= cfg.prop_pos_iou):
        raise bad("prop_neg_lo", "need prop_neg_lo < prop_neg_hi <= prop_pos_iou")
    for name in ("rpn_batch", "head_batch"):
        v = getattr(cfg, name)
        if v < 2 or v % 2 != 0:
            raise bad(name, f"must be even and >= 2, got {v}")
    if cfg.ohem_rank not in ("cls", "cls+reg"):
        raise bad("ohem_rank", "must be 'cls' or 'cls+reg'")
    if cfg.proposal_cap < 1:
        raise bad("proposal_cap", "must be >= 1")
    if cfg.train_proposal_cap < 0:
        raise bad("train_proposal_cap", "must be >= 0 (0 disables the cap)")
    if cfg.infer_proposal_cap < 0:
        raise bad("infer_proposal_cap", "must be >= 0 (0 disables the cap)")
    if cfg.min_proposal_size <= 0:
        raise bad("min_proposal_size", "must be positive")
    if len(cfg.trunk_channels) != 2 or any(c < 1 for c in cfg.trunk_channels):
        raise bad("trunk_channels", "need exactly two positive channel counts")
    for name in ("rpn_channels", "roi_size", "hidden_dim", "feature_dim"):
        if getattr(cfg, name) < 1:
            raise bad(name, "must be >= 1")
    if cfg.learning_rate <= 0:
        raise bad("learning_rate", "must be positive")
    if not (0.0 <= cfg.momentum < 1.0):
        raise bad("momentum", "must lie in [0, 1)")
    if cfg.clip_norm <= 0:
        raise bad("clip_norm", "must be positive")
    if cfg.steps < 0:
        raise bad("steps", "must be non-negative")
    if not cfg.scales or any(s <= 0 for s in cfg.scales):
        raise bad("scales", "must be non-empty and positive")
    if list(cfg.scales) != sorted(cfg.scales):
        raise bad("scales", "must be sorted ascending")
    if cfg.tpr_fp_count < 0:
        raise bad("tpr_fp_count", "must be non-negative")
    return cfg


def config_digest(cfg: Config) -> bytes:
    """Stable 32-byte digest of the canonical serialization."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).digest()
