"""The toy two-stage detector: shared conv trunk, proposal head, refinement head.

The whole graph is trained jointly in a single backward pass per step: the
proposal head sees anchor-level labels, the refinement head sees
proposal-level labels mined down to a balanced hard batch, and the trunk
receives both heads' gradients. Proposal box coordinates are treated as
constants by the refinement stage (no gradient flows through box decoding).

All parameters are float64; a fixed seed reproduces training bit-for-bit.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import layers
from .config import Config, config_digest
from .geometry import (
    AnchorSpec,
    Box,
    Detection,
    boxes_to_array,
    clip_box,
    decode_deltas,
    generate_anchors,
    nms,
    nms_indices,
)
from .losses import (
    Centers,
    LossReport,
    LossWeights,
    multitask_loss,
    smooth_l1,
    softmax_ce,
    update_centers,
)
from .matching import (
    NEGATIVE,
    POSITIVE,
    LabeledSample,
    OhemConfig,
    balanced_random_select,
    label_anchors,
    label_proposals,
    ohem_select,
)
from .pyramid import ScaleSet, merge_multiscale, pick_training_scale, resize_image

__all__ = [
    "MODEL_STRIDE",
    "DetectorModel",
    "StepReport",
    "TrainState",
    "detect",
    "detect_dataset",
    "detect_multiscale",
    "load_checkpoint",
    "make_train_state",
    "proposal_features",
    "restore_train_state",
    "save_checkpoint",
    "train_step",
]

MODEL_STRIDE = 4  # two 2x2 max-pools

CHECKPOINT_MAGIC = b"FDTC"
CHECKPOINT_VERSION = 1


class DetectorModel:
    """Parameter container plus hand-rolled forward/backward passes."""

    def __init__(self, cfg: Config, rng: np.random.Generator):
        c1, c2 = cfg.trunk_channels
        c3 = cfg.rpn_channels
        a = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
        p = cfg.roi_size
        pooled = c2 * p * p
        self.cfg = cfg
        self.anchor_spec = AnchorSpec(
            cfg.anchor_stride, tuple(cfg.anchor_scales), tuple(cfg.anchor_ratios)
        )
        self.anchors_per_cell = a

        def t(name, shape, fan_in):
            return layers.Tensor(name, layers.uniform_init(rng, shape, fan_in))

        def zeros(name, shape):
            return layers.Tensor(name, np.zeros(shape))

        self.params: dict[str, layers.Tensor] = {}
        for tensor in [
            t("trunk.conv1.w", (3, 3, 1, c1), 9),
            zeros("trunk.conv1.b", (c1,)),
            t("trunk.conv2.w", (3, 3, c1, c2), 9 * c1),
            zeros("trunk.conv2.b", (c2,)),
            t("rpn.conv.w", (3, 3, c2, c3), 9 * c2),
            zeros("rpn.conv.b", (c3,)),
            t("rpn.cls.w", (1, 1, c3, 2 * a), c3),
            zeros("rpn.cls.b", (2 * a,)),
            t("rpn.reg.w", (1, 1, c3, 4 * a), c3),
            zeros("rpn.reg.b", (4 * a,)),
            t("head.fc1.w", (pooled, cfg.hidden_dim), pooled),
            zeros("head.fc1.b", (cfg.hidden_dim,)),
            t("head.fc2.w", (cfg.hidden_dim, cfg.feature_dim), cfg.hidden_dim),
            zeros("head.fc2.b", (cfg.feature_dim,)),
            t("head.cls.w", (cfg.feature_dim, 2), cfg.feature_dim),
            zeros("head.cls.b", (2,)),
            t("head.reg.w", (cfg.feature_dim, 4), cfg.feature_dim),
            zeros("head.reg.b", (4,)),
        ]:
            self.params[tensor.name] = tensor
        self._anchor_cache: dict[tuple[int, int], list[Box]] = {}

    # -- plumbing ----------------------------------------------------------

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def anchors_for(self, feature_w: int, feature_h: int) -> list[Box]:
        key = (feature_w, feature_h)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(self.anchor_spec, feature_w, feature_h)
        return self._anchor_cache[key]

    # -- forward/backward ---------------------------------------------------

    def forward_trunk(self, image: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Image (H, W) -> feature map (H/4, W/4, C2). H, W must be stride-divisible."""
        h, w = image.shape
        if h % MODEL_STRIDE != 0 or w % MODEL_STRIDE != 0:
            raise ValueError(f"image dims must be divisible by {MODEL_STRIDE}, got {w}x{h}")
        x = np.asarray(image, dtype=np.float64)[..., None]
        c1, k1 = layers.conv2d_forward(x, self.params["trunk.conv1.w"].data,
                                       self.params["trunk.conv1.b"].data)
        r1, m1 = layers.relu_forward(c1)
        p1, kp1 = layers.maxpool2_forward(r1)
        c2, k2 = layers.conv2d_forward(p1, self.params["trunk.conv2.w"].data,
                                       self.params["trunk.conv2.b"].data)
        r2, m2 = layers.relu_forward(c2)
        fm, kp2 = layers.maxpool2_forward(r2)
        return fm, (k1, m1, kp1, k2, m2, kp2)

    def backward_trunk(self, dfm: np.ndarray, cache: tuple) -> None:
        k1, m1, kp1, k2, m2, kp2 = cache
        d = layers.maxpool2_backward(dfm, kp2)
        d = layers.relu_backward(d, m2)
        d, dw2, db2 = layers.conv2d_backward(d, k2)
        self.params["trunk.conv2.w"].grad += dw2
        self.params["trunk.conv2.b"].grad += db2
        d = layers.maxpool2_backward(d, kp1)
        d = layers.relu_backward(d, m1)
        _, dw1, db1 = layers.conv2d_backward(d, k1)
        self.params["trunk.conv1.w"].grad += dw1
        self.params["trunk.conv1.b"].grad += db1

    def forward_rpn(self, fm: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple]:
        """Feature map -> per-anchor logits (N, 2) and deltas (N, 4).

        Flat anchor order matches generate_anchors: row-major cells, then the
        per-cell anchor index.
        """
        hf, wf, _ = fm.shape
        a = self.anchors_per_cell
        c, kc = layers.conv2d_forward(fm, self.params["rpn.conv.w"].data,
                                      self.params["rpn.conv.b"].data)
        r, mr = layers.relu_forward(c)
        cls_map, kcls = layers.conv2d_forward(r, self.params["rpn.cls.w"].data,
                                              self.params["rpn.cls.b"].data)
        reg_map, kreg = layers.conv2d_forward(r, self.params["rpn.reg.w"].data,
                                              self.params["rpn.reg.b"].data)
        logits = cls_map.reshape(hf * wf * a, 2)
        deltas = reg_map.reshape(hf * wf * a, 4)
        return logits, deltas, (kc, mr, kcls, kreg, (hf, wf, a))

    def backward_rpn(self, dlogits: np.ndarray, ddeltas: np.ndarray, cache: tuple) -> np.ndarray:
        kc, mr, kcls, kreg, (hf, wf, a) = cache
        dcls_map = dlogits.reshape(hf, wf, 2 * a)
        dreg_map = ddeltas.reshape(hf, wf, 4 * a)
        dr1, dwc, dbc = layers.conv2d_backward(dcls_map, kcls)
        self.params["rpn.cls.w"].grad += dwc
        self.params["rpn.cls.b"].grad += dbc
        dr2, dwr, dbr = layers.conv2d_backward(dreg_map, kreg)
        self.params["rpn.reg.w"].grad += dwr
        self.params["rpn.reg.b"].grad += dbr
        d = layers.relu_backward(dr1 + dr2, mr)
        dfm, dw, db = layers.conv2d_backward(d, kc)
        self.params["rpn.conv.w"].grad += dw
        self.params["rpn.conv.b"].grad += db
        return dfm

    def forward_head(self, pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple]:
        """Pooled RoI features (m, C2*P*P) -> (features, logits, deltas).

        The feature vector is the pre-logit activation used by the center loss.
        """
        h1, k1 = layers.fc_forward(pooled, self.params["head.fc1.w"].data,
                                   self.params["head.fc1.b"].data)
        r1, m1 = layers.relu_forward(h1)
        h2, k2 = layers.fc_forward(r1, self.params["head.fc2.w"].data,
                                   self.params["head.fc2.b"].data)
        feats, m2 = layers.relu_forward(h2)
        logits, kc = layers.fc_forward(feats, self.params["head.cls.w"].data,
                                       self.params["head.cls.b"].data)
        deltas, kr = layers.fc_forward(feats, self.params["head.reg.w"].data,
                                       self.params["head.reg.b"].data)
        return feats, logits, deltas, (k1, m1, k2, m2, kc, kr)

    def backward_head(
        self,
        dlogits: np.ndarray,
        ddeltas: np.ndarray,
        dfeatures: np.ndarray,
        cache: tuple,
    ) -> np.ndarray:
        k1, m1, k2, m2, kc, kr = cache
        dh, dwc, dbc = layers.fc_backward(dlogits, kc)
        self.params["head.cls.w"].grad += dwc
        self.params["head.cls.b"].grad += dbc
        dh2, dwr, dbr = layers.fc_backward(ddeltas, kr)
        self.params["head.reg.w"].grad += dwr
        self.params["head.reg.b"].grad += dbr
        d = layers.relu_backward(dh + dh2 + dfeatures, m2)
        d, dw2, db2 = layers.fc_backward(d, k2)
        self.params["head.fc2.w"].grad += dw2
        self.params["head.fc2.b"].grad += db2
        d = layers.relu_backward(d, m1)
        dpooled, dw1, db1 = layers.fc_backward(d, k1)
        self.params["head.fc1.w"].grad += dw1
        self.params["head.fc1.b"].grad += db1
        return dpooled


@dataclass(eq=False)
class TrainState:
    model: DetectorModel
    centers: Centers
    step: int
    rng_seed: int
    rng: np.random.Generator
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class StepReport:
    """Losses for one optimization step; ``head`` is the refinement-stage report."""

    step: int
    rpn_cls: float
    rpn_reg: float
    head: LossReport
    objective: float
    n_proposals: int
    n_selected_pos: int
    n_selected_neg: int
    cls_face: float
    cls_background: float


def make_train_state(cfg: Config) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    model = DetectorModel(cfg, rng)
    centers = Centers.zeros(cfg.feature_dim, cfg.center_alpha)
    return TrainState(model=model, centers=centers, step=0, rng_seed=cfg.seed, rng=rng)


def _face_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e[:, 1] / e.sum(axis=1)


def _propose(
    logits: np.ndarray,
    deltas: np.ndarray,
    anchors: Sequence[Box],
    image_w: int,
    image_h: int,
    cfg: Config,
    post_nms_cap: int = 0,
) -> tuple[list[Box], np.ndarray]:
    """Decode, clip, and prune RPN output into scored proposal boxes.

    Top ``proposal_cap`` candidates by score (ties toward the lower anchor
    index) go through NMS at ``nms_proposals``; a nonzero ``post_nms_cap``
    keeps only the highest-scored survivors.
    """
    scores = _face_probs(logits)
    boxes = decode_deltas(deltas, boxes_to_array(anchors))
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(image_w))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(image_h))
    wide = (boxes[:, 2] - boxes[:, 0]) >= cfg.min_proposal_size
    tall = (boxes[:, 3] - boxes[:, 1]) >= cfg.min_proposal_size
    valid = np.flatnonzero(wide & tall)
    if valid.size == 0:
        return [], np.zeros(0)
    order = valid[np.lexsort((valid, -scores[valid]))][: cfg.proposal_cap]
    keep = nms_indices(boxes[order], scores[order], cfg.nms_proposals)
    if post_nms_cap > 0:
        keep = keep[:post_nms_cap]  # nms output is score-ordered
    rows = order[keep]
    return [Box(*boxes[i]) for i in rows], np.clip(scores[rows], 0.0, 1.0)


def _scale_boxes(boxes: Sequence[Box], sx: float, sy: float) -> list[Box]:
    return [Box(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy) for b in boxes]


def _pool_proposals(
    model: DetectorModel,
    fm: np.ndarray,
    proposals: Sequence[Box],
    with_cache: bool = True,
) -> tuple[np.ndarray, list, list[int]]:
    """RoI-pool proposals (image coords) off the stride-4 feature map.

    Returns the pooled matrix, per-row backward caches (empty entries when
    ``with_cache`` is off), and the indices of proposals that survived
    (zero-area boxes on the feature map are dropped).
    """
    p = model.cfg.roi_size
    rows, caches, kept = [], [], []
    hf, wf, _ = fm.shape
    for i, b in enumerate(proposals):
        fb = Box(b.x1 / MODEL_STRIDE, b.y1 / MODEL_STRIDE,
                 b.x2 / MODEL_STRIDE, b.y2 / MODEL_STRIDE)
        if min(fb.x2, wf) - max(fb.x1, 0) <= 0 or min(fb.y2, hf) - max(fb.y1, 0) <= 0:
            continue
        if with_cache:
            pooled, cache = layers.roi_pool_forward(fm, fb, p)
            caches.append(cache)
        else:
            pooled = layers.roi_pool_values(fm, fb, p)
        rows.append(pooled.ravel())
        kept.append(i)
    if not rows:
        return np.zeros((0, model.cfg.trunk_channels[1] * p * p)), [], []
    return np.stack(rows), caches, kept


def _rank_losses(
    logits: np.ndarray,
    labeled: Sequence[LabeledSample],
    pred_deltas: np.ndarray,
    cfg: Config,
) -> np.ndarray:
    """Per-sample mining score: classification loss, optionally plus regression."""
    labels = np.array([1 if s.label == POSITIVE else 0 for s in labeled], dtype=np.int64)
    _, per_sample, _ = softmax_ce(logits, labels)
    if cfg.ohem_rank == "cls+reg":
        for s in labeled:
            if s.label == POSITIVE:
                r = pred_deltas[s.index] - np.array(s.target_delta.as_tuple())
                a = np.abs(r)
                per_sample[s.index] += cfg.lam * float(
                    np.where(a < 1.0, 0.5 * r * r, a - 0.5).sum()
                )
    return per_sample


def _select(
    labeled: Sequence[LabeledSample],
    rank: np.ndarray,
    batch: int,
    use_ohem: bool,
    rng: np.random.Generator,
) -> list[int]:
    cfg = OhemConfig(batch)
    if use_ohem:
        return ohem_select(labeled, rank, cfg)
    return balanced_random_select(labeled, rng, cfg)


def train_step(
    state: TrainState,
    batch: Sequence[tuple[np.ndarray, Sequence[Box]]],
    cfg: Config,
) -> tuple[TrainState, StepReport]:
    """One joint optimization step over a batch of (image, ground truths).

    Pipeline per image: trunk + proposal head forward, anchor labeling and a
    balanced proposal-head mini-batch, proposal selection (score top-k then
    NMS), RoI pooling, refinement head forward, proposal labeling, hard
    example mining, combined loss, full backward, then one SGD update and a
    center update. Raises if a mined batch has no positives and no negatives.
    """
    if not batch:
        raise ValueError("empty training batch")
    model = state.model
    model.zero_grads()
    weights = LossWeights(cfg.lam, cfg.mu)
    n_img = len(batch)

    rpn_cls_sum = rpn_reg_sum = 0.0
    head_cls = head_reg = head_center = 0.0
    per_cls_face: list[float] = []
    per_cls_bg: list[float] = []
    n_props = n_sel_pos = n_sel_neg = 0
    new_centers = state.centers

    for image, gts in batch:
        if cfg.multiscale_train and len(cfg.scales) > 1:
            s = pick_training_scale(state.rng, ScaleSet(tuple(cfg.scales)))
        else:
            s = 1.0
        if s != 1.0:
            scaled = resize_image(image, s, MODEL_STRIDE)
            sy = scaled.shape[0] / image.shape[0]
            sx = scaled.shape[1] / image.shape[1]
            image, gts = scaled, _scale_boxes(gts, sx, sy)
        h, w = image.shape

        fm, trunk_cache = model.forward_trunk(image)
        rpn_logits, rpn_deltas, rpn_cache = model.forward_rpn(fm)
        anchors = model.anchors_for(fm.shape[1], fm.shape[0])

        # --- proposal-head (anchor) stage ---
        labeled_anchors = label_anchors(
            anchors, list(gts), w, h, cfg.anchor_pos_iou, cfg.anchor_neg_iou
        )
        anchor_rank = _rank_losses(rpn_logits, labeled_anchors, rpn_deltas, cfg)
        rpn_sel = _select(labeled_anchors, anchor_rank, cfg.rpn_batch, cfg.ohem_rpn, state.rng)
        sel_labels = np.array(
            [1 if labeled_anchors[i].label == POSITIVE else 0 for i in rpn_sel], dtype=np.int64
        )
        cls_loss, _, grad_sel_logits = softmax_ce(rpn_logits[rpn_sel], sel_labels)
        pos_mask = sel_labels.astype(np.float64)
        targets = np.zeros((len(rpn_sel), 4))
        for row, i in enumerate(rpn_sel):
            if labeled_anchors[i].label == POSITIVE:
                targets[row] = labeled_anchors[i].target_delta.as_tuple()
        reg_loss, grad_sel_deltas = smooth_l1(rpn_deltas[rpn_sel], targets, pos_mask)

        dlogits = np.zeros_like(rpn_logits)
        dlogits[rpn_sel] = grad_sel_logits
        ddeltas = np.zeros_like(rpn_deltas)
        ddeltas[rpn_sel] = cfg.lam * grad_sel_deltas
        rpn_cls_sum += cls_loss
        rpn_reg_sum += reg_loss

        # --- refinement-head (proposal) stage ---
        proposals, _ = _propose(
            rpn_logits, rpn_deltas, anchors, w, h, cfg, cfg.train_proposal_cap
        )
        if cfg.add_gt_proposals:
            proposals = proposals + [clip_box(g, w, h) for g in gts]
        pooled, roi_caches, kept = _pool_proposals(model, fm, proposals)
        proposals = [proposals[i] for i in kept]
        n_props += len(proposals)

        dfm_head = np.zeros_like(fm)
        if proposals:
            feats, logits, deltas, head_cache = model.forward_head(pooled)
            labeled_props = label_proposals(
                proposals, list(gts), cfg.prop_pos_iou, cfg.prop_neg_lo, cfg.prop_neg_hi
            )
            prop_rank = _rank_losses(logits, labeled_props, deltas, cfg)
            sel = _select(labeled_props, prop_rank, cfg.head_batch, cfg.ohem, state.rng)

            sel_arr = np.array(sel, dtype=np.int64)
            labels = np.array(
                [1 if labeled_props[i].label == POSITIVE else 0 for i in sel], dtype=np.int64
            )
            tgt = np.zeros((len(sel), 4))
            for row, i in enumerate(sel):
                if labeled_props[i].label == POSITIVE:
                    tgt[row] = labeled_props[i].target_delta.as_tuple()
            pmask = labels.astype(np.float64)
            report, grads = multitask_loss(
                logits[sel_arr], labels, deltas[sel_arr], tgt, pmask,
                feats[sel_arr], state.centers, weights,
            )
            head_cls += report.cls
            head_reg += report.reg
            head_center += report.center
            n_sel_pos += int(labels.sum())
            n_sel_neg += int((1 - labels).sum())
            if (labels == 1).any():
                per_cls_face.append(float(report.per_sample_cls[labels == 1].mean()))
            if (labels == 0).any():
                per_cls_bg.append(float(report.per_sample_cls[labels == 0].mean()))

            dl = np.zeros_like(logits)
            dl[sel_arr] = grads.logits
            dd = np.zeros_like(deltas)
            dd[sel_arr] = grads.deltas
            df = np.zeros_like(feats)
            df[sel_arr] = grads.features
            dpooled = model.backward_head(dl, dd, df, head_cache)
            for row in sorted(set(int(i) for i in sel)):
                layers.roi_pool_backward(
                    dpooled[row].reshape(cfg.roi_size, cfg.roi_size, -1),
                    roi_caches[row],
                    out=dfm_head,
                )
            new_centers = update_centers(new_centers, feats[sel_arr], labels)
        else:
            raise ValueError("untrainable batch: no usable proposals")

        dfm = dfm_head + model.backward_rpn(dlogits, ddeltas, rpn_cache)
        model.backward_trunk(dfm, trunk_cache)

    # --- SGD with momentum and global-norm clipping ---
    inv = 1.0 / n_img
    sq = 0.0
    for p in model.params.values():
        p.grad *= inv
        sq += float((p.grad * p.grad).sum())
    norm = np.sqrt(sq)
    if norm > cfg.clip_norm:
        scale = cfg.clip_norm / norm
        for p in model.params.values():
            p.grad *= scale
    for name, p in model.params.items():
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v - cfg.learning_rate * p.grad
        state.velocity[name] = v
        p.data += v
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"non-finite parameter {name} after step {state.step}")

    state.centers = new_centers
    state.step += 1

    head_report = LossReport(
        cls=head_cls * inv,
        reg=head_reg * inv,
        center=head_center * inv,
        total=(head_cls + cfg.lam * head_reg + cfg.mu * head_center) * inv,
        per_sample_cls=np.zeros(0),
    )
    report = StepReport(
        step=state.step,
        rpn_cls=rpn_cls_sum * inv,
        rpn_reg=rpn_reg_sum * inv,
        head=head_report,
        objective=(rpn_cls_sum + cfg.lam * rpn_reg_sum) * inv + head_report.total,
        n_proposals=n_props,
        n_selected_pos=n_sel_pos,
        n_selected_neg=n_sel_neg,
        cls_face=float(np.mean(per_cls_face)) if per_cls_face else 0.0,
        cls_background=float(np.mean(per_cls_bg)) if per_cls_bg else 0.0,
    )
    return state, report


def detect(
    model: DetectorModel,
    centers: Centers,
    image: np.ndarray,
    score_threshold: float,
    cfg: Optional[Config] = None,
    scale_id: int = 0,
) -> list[Detection]:
    """Full two-stage inference on one image.

    Proposals (NMS at ``nms_proposals``) are refined by the second head; boxes
    are decoded, clipped, kept when score strictly exceeds the threshold, and
    reduced with NMS at ``nms_final``. ``centers`` is accepted for interface
    symmetry with training; inference does not consult it.
    """
    if not (0.0 <= score_threshold <= 1.0):
        raise ValueError(f"score_threshold outside [0, 1]: {score_threshold}")
    cfg = cfg if cfg is not None else model.cfg
    h, w = image.shape
    fm, _ = model.forward_trunk(image)
    rpn_logits, rpn_deltas, _ = model.forward_rpn(fm)
    anchors = model.anchors_for(fm.shape[1], fm.shape[0])
    proposals, _ = _propose(
        rpn_logits, rpn_deltas, anchors, w, h, cfg, cfg.infer_proposal_cap
    )
    pooled, _, kept = _pool_proposals(model, fm, proposals, with_cache=False)
    if not kept:
        return []
    proposals = [proposals[i] for i in kept]
    _, logits, deltas, _ = model.forward_head(pooled)
    scores = _face_probs(logits)
    boxes = decode_deltas(deltas, boxes_to_array(proposals))
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(w))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(h))
    dets = []
    for i in range(len(proposals)):
        x1, y1, x2, y2 = boxes[i]
        if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
            continue
        score = float(np.clip(scores[i], 0.0, 1.0))
        if score > score_threshold:
            dets.append(Detection(Box(x1, y1, x2, y2), score, scale_id))
    return nms(dets, cfg.nms_final)


def proposal_features(
    model: DetectorModel,
    image: np.ndarray,
    gts: Sequence[Box],
    cfg: Optional[Config] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Refinement-head feature vectors and labels for one image's proposals.

    Ground-truth boxes are appended to the proposal set so the face class is
    populated even when the proposal head is weak; labels use the standard
    proposal thresholds (1 face, 0 background, -1 ignore).
    """
    cfg = cfg if cfg is not None else model.cfg
    h, w = image.shape
    fm, _ = model.forward_trunk(image)
    rpn_logits, rpn_deltas, _ = model.forward_rpn(fm)
    anchors = model.anchors_for(fm.shape[1], fm.shape[0])
    proposals, _ = _propose(
        rpn_logits, rpn_deltas, anchors, w, h, cfg, cfg.train_proposal_cap
    )
    proposals = proposals + [clip_box(g, w, h) for g in gts]
    pooled, _, kept = _pool_proposals(model, fm, proposals, with_cache=False)
    if not kept:
        return np.zeros((0, cfg.feature_dim)), np.zeros(0, dtype=np.int64)
    proposals = [proposals[i] for i in kept]
    feats, _, _, _ = model.forward_head(pooled)
    labeled = label_proposals(
        proposals, list(gts), cfg.prop_pos_iou, cfg.prop_neg_lo, cfg.prop_neg_hi
    )
    labels = np.array([s.label for s in labeled], dtype=np.int64)
    return feats, labels


def detect_dataset(
    model: DetectorModel,
    centers: Centers,
    images: Sequence[np.ndarray],
    score_threshold: float,
    cfg: Optional[Config] = None,
    scales: Optional[tuple[float, ...]] = None,
    jobs: int = 1,
) -> list[list[Detection]]:
    """Detect over many images, optionally with worker processes.

    Results are reduced in input order, so the output is identical for any
    ``jobs`` setting. ``scales=None`` runs single-scale at native size.
    """
    cfg = cfg if cfg is not None else model.cfg
    args = [(model, centers, img, score_threshold, cfg, scales) for img in images]
    if jobs <= 1 or len(images) <= 1:
        return [_detect_job(a) for a in args]
    import multiprocessing

    with multiprocessing.Pool(jobs) as pool:
        return pool.map(_detect_job, args)


def _detect_job(args) -> list[Detection]:
    model, centers, image, score_threshold, cfg, scales = args
    if scales is None:
        return detect(model, centers, image, score_threshold, cfg)
    return detect_multiscale(
        model, centers, image, score_threshold, ScaleSet(tuple(scales)), cfg
    )


def detect_multiscale(
    model: DetectorModel,
    centers: Centers,
    image: np.ndarray,
    score_threshold: float,
    scale_set: Optional[ScaleSet] = None,
    cfg: Optional[Config] = None,
) -> list[Detection]:
    """Run detection over the image pyramid and merge back to the original frame.

    Stride snapping makes the effective resize factor differ slightly from the
    nominal scale; boxes are pre-corrected to the nominal frame so the merge's
    divide-by-scale lands exactly in original coordinates.
    """
    cfg = cfg if cfg is not None else model.cfg
    scale_set = scale_set if scale_set is not None else ScaleSet(tuple(cfg.scales))
    h, w = image.shape
    per_scale: list[tuple[float, list[Detection]]] = []
    for idx, s in enumerate(scale_set.scales):
        resized = image if s == 1.0 else resize_image(image, s, MODEL_STRIDE)
        sy = resized.shape[0] / h
        sx = resized.shape[1] / w
        dets = detect(model, centers, resized, score_threshold, cfg, scale_id=idx)
        if sx != s or sy != s:
            dets = [
                replace(
                    d,
                    box=Box(
                        d.box.x1 * s / sx, d.box.y1 * s / sy,
                        d.box.x2 * s / sx, d.box.y2 * s / sy,
                    ),
                )
                for d in dets
            ]
        per_scale.append((s, dets))
    return merge_multiscale(per_scale, cfg.nms_final)


# -- checkpoint I/O ----------------------------------------------------------
#
# Layout (little-endian throughout):
#   magic "FDTC" | u32 version | u32 digest_len | digest bytes
#   u32 n_entries, then per entry:
#     u32 name_len | name utf-8 | u32 rank | u32 dim...  | f64 data (C order)


def save_checkpoint(path, state: TrainState, cfg: Config) -> None:
    entries: list[tuple[str, np.ndarray]] = [
        (name, p.data) for name, p in state.model.params.items()
    ]
    entries.append(("centers.values", state.centers.values))
    entries.append(("centers.alpha", np.array([state.centers.alpha])))
    entries.append(("train.step", np.array([float(state.step)])))
    digest = config_digest(cfg)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(digest)))
        f.write(digest)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"truncated checkpoint {path}")
        out = blob[off : off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (dlen,) = struct.unpack("<I", take(4))
    digest = take(dlen)
    (n_entries,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = [struct.unpack("<I", take(4))[0] for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(count * 8), dtype="<f8").reshape(dims)
        entries[name] = data.astype(np.float64)
    return entries, digest


def restore_train_state(cfg: Config, path) -> TrainState:
    """Rebuild a TrainState from a checkpoint; the config must match its digest."""
    entries, digest = load_checkpoint(path)
    if digest != config_digest(cfg):
        raise ValueError(
            f"checkpoint {path} was written with a different config (digest mismatch)"
        )
    state = make_train_state(cfg)
    for name, p in state.model.params.items():
        if name not in entries:
            raise ValueError(f"checkpoint missing tensor {name}")
        if entries[name].shape != p.data.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {entries[name].shape}")
        p.data[...] = entries[name]
    state.centers = Centers(entries["centers.values"], float(entries["centers.alpha"][0]))
    state.step = int(entries["train.step"][0])
    return state
