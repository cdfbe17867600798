"""Central finite-difference verification of every analytic gradient.

Each check compares the hand-written backward pass against (f(x+h) - f(x-h)) /
2h at h = 1e-5 in double precision. The error metric is
|analytic - numeric| / max(|analytic|, |numeric|, 1e-3), maximized over all
perturbed coordinates; the floor keeps finite-difference noise on near-zero
coordinates from registering as disagreement.

Sampled cases are redrawn when an input sits within 1e-4 of a kink (ReLU
zero crossings, pooling ties, SmoothL1 elbows), since the two-sided stencil
straddling a non-differentiable point says nothing about either one-sided
gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import layers
from .config import Config
from .detector import DetectorModel
from .geometry import Box
from .losses import (
    Centers,
    LossWeights,
    center_loss,
    multitask_loss,
    smooth_l1,
    softmax_ce,
)

__all__ = ["CheckResult", "run_all", "LOSS_TOL", "NETWORK_TOL"]

EPS = 1e-5
ERR_FLOOR = 1e-3
KINK_MARGIN = 1e-4
LOSS_TOL = 1e-5
NETWORK_TOL = 1e-4
CASES = 20


@dataclass(frozen=True)
class CheckResult:
    name: str
    cases: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERR_FLOOR)


def _fd(f: Callable[[], float], arr: np.ndarray, flat_idx: int) -> float:
    orig = arr.flat[flat_idx]
    arr.flat[flat_idx] = orig + EPS
    hi = f()
    arr.flat[flat_idx] = orig - EPS
    lo = f()
    arr.flat[flat_idx] = orig
    return (hi - lo) / (2.0 * EPS)


def _max_err_over(
    f: Callable[[], float], arr: np.ndarray, grad: np.ndarray, coords=None
) -> float:
    if coords is None:
        coords = range(arr.size)
    worst = 0.0
    for idx in coords:
        numeric = _fd(f, arr, idx)
        worst = max(worst, _rel_err(float(grad.flat[idx]), numeric))
    return worst


def _draw_safe(draw: Callable[[], tuple], safe: Callable[[tuple], bool], limit: int = 60):
    for _ in range(limit):
        case = draw()
        if safe(case):
            return case
    raise RuntimeError("could not draw a kink-free finite-difference case")


def _pool_gaps_ok(x: np.ndarray) -> bool:
    h, w, c = x.shape
    win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(-1, 4)
    part = np.sort(win, axis=1)
    return bool(np.all(part[:, 3] - part[:, 2] > KINK_MARGIN))


def _pool_gaps_after_relu_ok(x: np.ndarray) -> bool:
    """Pool-tie safety for rectified maps: exact-zero ties are dead units.

    A window is unsafe only when two live values sit within the margin; ties
    among zeros carry no gradient (the ReLU mask kills them) and a live top
    above a zero runner-up has the full activation as its gap.
    """
    h, w, c = x.shape
    win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(-1, 4)
    part = np.sort(win, axis=1)
    return bool(np.all((part[:, 2] <= 0.0) | (part[:, 3] - part[:, 2] > KINK_MARGIN)))


def _relu_ok(x: np.ndarray) -> bool:
    return bool(np.all(np.abs(x) > KINK_MARGIN))


# -- individual layer checks ---------------------------------------------------


def _check_conv(rng: np.random.Generator, kernel: int) -> float:
    h, w = 6, 6
    cin, cout = 2, 3
    x = rng.normal(size=(h, w, cin))
    wgt = rng.normal(size=(kernel, kernel, cin, cout))
    b = rng.normal(size=(cout,))
    proj = rng.normal(size=(h, w, cout))

    def f() -> float:
        y, _ = layers.conv2d_forward(x, wgt, b)
        return float((y * proj).sum())

    y, cache = layers.conv2d_forward(x, wgt, b)
    dx, dw, db = layers.conv2d_backward(proj, cache)
    worst = _max_err_over(f, x, dx)
    worst = max(worst, _max_err_over(f, wgt, dw))
    worst = max(worst, _max_err_over(f, b, db))
    return worst


def _check_relu(rng: np.random.Generator) -> float:
    x = _draw_safe(lambda: rng.normal(size=(5, 7)), _relu_ok)
    proj = rng.normal(size=x.shape)

    def f() -> float:
        y, _ = layers.relu_forward(x)
        return float((y * proj).sum())

    _, mask = layers.relu_forward(x)
    dx = layers.relu_backward(proj, mask)
    return _max_err_over(f, x, dx)


def _check_maxpool(rng: np.random.Generator) -> float:
    x = _draw_safe(lambda: rng.normal(size=(6, 8, 2)), _pool_gaps_ok)
    proj = rng.normal(size=(3, 4, 2))

    def f() -> float:
        y, _ = layers.maxpool2_forward(x)
        return float((y * proj).sum())

    _, cache = layers.maxpool2_forward(x)
    dx = layers.maxpool2_backward(proj, cache)
    return _max_err_over(f, x, dx)


def _check_fc(rng: np.random.Generator) -> float:
    m, nin, nout = 4, 6, 5
    x = rng.normal(size=(m, nin))
    w = rng.normal(size=(nin, nout))
    b = rng.normal(size=(nout,))
    proj = rng.normal(size=(m, nout))

    def f() -> float:
        y, _ = layers.fc_forward(x, w, b)
        return float((y * proj).sum())

    _, cache = layers.fc_forward(x, w, b)
    dx, dw, db = layers.fc_backward(proj, cache)
    worst = _max_err_over(f, x, dx)
    worst = max(worst, _max_err_over(f, w, dw))
    return max(worst, _max_err_over(f, b, db))


def _roi_gaps_ok(fm: np.ndarray, box: Box, p: int, rectified: bool = False) -> bool:
    """Demand a clear winner in every pooling bin.

    With ``rectified`` the map comes out of a ReLU, so exact-zero ties are
    gradient-dead and allowed.
    """
    h, w, c = fm.shape
    x1 = min(max(box.x1, 0.0), w)
    y1 = min(max(box.y1, 0.0), h)
    x2 = min(max(box.x2, 0.0), w)
    y2 = min(max(box.y2, 0.0), h)
    for j in range(p):
        ys = min(max(int(math.floor(y1 + (y2 - y1) * j / p)), 0), h - 1)
        ye = min(max(int(math.ceil(y1 + (y2 - y1) * (j + 1) / p)), ys + 1), h)
        for i in range(p):
            xs = min(max(int(math.floor(x1 + (x2 - x1) * i / p)), 0), w - 1)
            xe = min(max(int(math.ceil(x1 + (x2 - x1) * (i + 1) / p)), xs + 1), w)
            region = fm[ys:ye, xs:xe, :].reshape(-1, c)
            if region.shape[0] == 1:
                continue
            part = np.sort(region, axis=0)
            tied = part[-1] - part[-2] <= KINK_MARGIN
            if rectified:
                tied &= part[-2] > 0.0
            if np.any(tied):
                return False
    return True


def _check_roi_pool(rng: np.random.Generator) -> float:
    h, w, c = 8, 8, 2
    p = 3

    def draw():
        fm = rng.normal(size=(h, w, c))
        x1 = rng.uniform(0.0, w - 3.0)
        y1 = rng.uniform(0.0, h - 3.0)
        box = Box(x1, y1, x1 + rng.uniform(2.0, w - x1), y1 + rng.uniform(2.0, h - y1))
        return fm, box

    fm, box = _draw_safe(draw, lambda case: _roi_gaps_ok(case[0], case[1], p))
    proj = rng.normal(size=(p, p, c))

    def f() -> float:
        y, _ = layers.roi_pool_forward(fm, box, p)
        return float((y * proj).sum())

    _, cache = layers.roi_pool_forward(fm, box, p)
    dfm = layers.roi_pool_backward(proj, cache)
    return _max_err_over(f, fm, dfm)


# -- loss checks -----------------------------------------------------------------


def _check_softmax_ce(rng: np.random.Generator) -> float:
    m = 8
    logits = rng.normal(size=(m, 2)) * 2.0
    labels = rng.integers(0, 2, size=m)

    def f() -> float:
        loss, _, _ = softmax_ce(logits, labels)
        return loss

    _, _, grad = softmax_ce(logits, labels)
    return _max_err_over(f, logits, grad)


def _check_center(rng: np.random.Generator) -> float:
    m, d = 6, 5
    feats = rng.normal(size=(m, d))
    labels = rng.integers(0, 2, size=m)
    centers = Centers(rng.normal(size=(2, d)))

    def f() -> float:
        loss, _ = center_loss(feats, labels, centers)
        return loss

    _, grad = center_loss(feats, labels, centers)
    return _max_err_over(f, feats, grad)


def _check_smooth_l1(rng: np.random.Generator) -> float:
    m = 6

    def draw():
        pred = rng.normal(size=(m, 4)) * 1.5
        target = rng.normal(size=(m, 4)) * 1.5
        mask = (rng.uniform(size=m) < 0.6).astype(np.float64)
        return pred, target, mask

    def safe(case) -> bool:
        r = np.abs(case[0] - case[1])
        return bool(np.all(np.abs(r - 1.0) > KINK_MARGIN) and np.all(r > KINK_MARGIN))

    pred, target, mask = _draw_safe(draw, safe)

    def f() -> float:
        loss, _ = smooth_l1(pred, target, mask)
        return loss

    _, grad = smooth_l1(pred, target, mask)
    return _max_err_over(f, pred, grad)


def _check_multitask(rng: np.random.Generator) -> float:
    m, d = 6, 4
    weights = LossWeights(lam=1.3, mu=0.7)

    def draw():
        logits = rng.normal(size=(m, 2)) * 2.0
        labels = rng.integers(0, 2, size=m)
        pred = rng.normal(size=(m, 4)) * 1.5
        target = rng.normal(size=(m, 4)) * 1.5
        mask = labels.astype(np.float64)
        feats = rng.normal(size=(m, d))
        centers = Centers(rng.normal(size=(2, d)))
        return logits, labels, pred, target, mask, feats, centers

    def safe(case) -> bool:
        r = np.abs(case[2] - case[3])
        return bool(np.all(np.abs(r - 1.0) > KINK_MARGIN))

    logits, labels, pred, target, mask, feats, centers = _draw_safe(draw, safe)

    def f() -> float:
        report, _ = multitask_loss(
            logits, labels, pred, target, mask, feats, centers, weights
        )
        return report.total

    _, grads = multitask_loss(logits, labels, pred, target, mask, feats, centers, weights)
    worst = _max_err_over(f, logits, grads.logits)
    worst = max(worst, _max_err_over(f, pred, grads.deltas))
    return max(worst, _max_err_over(f, feats, grads.features))


# -- full-network check -----------------------------------------------------------


def _tiny_config(seed: int) -> Config:
    return replace(
        Config(),
        seed=seed,
        image_w=16,
        image_h=16,
        trunk_channels=(4, 6),
        rpn_channels=6,
        anchor_scales=(8.0,),
        anchor_ratios=(1.0,),
        roi_size=2,
        hidden_dim=12,
        feature_dim=8,
    )


def _network_margins_ok(model: DetectorModel, image, rois, p) -> bool:
    fm, _ = model.forward_trunk(image)
    # pre-activation margins for both trunk ReLUs and pool gaps
    x = image[..., None]
    a1, _ = layers.conv2d_forward(x, model.params["trunk.conv1.w"].data,
                                  model.params["trunk.conv1.b"].data)
    if not (_relu_ok(a1) and _pool_gaps_after_relu_ok(np.maximum(a1, 0.0))):
        return False
    p1, _ = layers.maxpool2_forward(np.maximum(a1, 0.0))
    a2, _ = layers.conv2d_forward(p1, model.params["trunk.conv2.w"].data,
                                  model.params["trunk.conv2.b"].data)
    if not (_relu_ok(a2) and _pool_gaps_after_relu_ok(np.maximum(a2, 0.0))):
        return False
    rc, _ = layers.conv2d_forward(fm, model.params["rpn.conv.w"].data,
                                  model.params["rpn.conv.b"].data)
    if not _relu_ok(rc):
        return False
    for roi in rois:
        if not _roi_gaps_ok(fm, roi, p, rectified=True):
            return False
    pooled_rows = []
    for roi in rois:
        pooled, _ = layers.roi_pool_forward(fm, roi, p)
        pooled_rows.append(pooled.ravel())
    pooled = np.stack(pooled_rows)
    h1, _ = layers.fc_forward(pooled, model.params["head.fc1.w"].data,
                              model.params["head.fc1.b"].data)
    if not _relu_ok(h1):
        return False
    h2, _ = layers.fc_forward(np.maximum(h1, 0.0), model.params["head.fc2.w"].data,
                              model.params["head.fc2.b"].data)
    return _relu_ok(h2)


def _check_network(rng: np.random.Generator, n_params: int = 50) -> float:
    """End-to-end gradient through trunk, both heads, RoI pooling, and all losses.

    The structural choices (RoI boxes, sampled anchors, labels, targets) are
    frozen so the loss is a smooth function of the parameters near the base
    point; perturbing a weight must not re-route pooling or mining decisions.
    """
    cfg = _tiny_config(int(rng.integers(1 << 31)))
    weights = LossWeights(lam=1.0, mu=0.05)

    def draw():
        case_rng = np.random.default_rng(rng.integers(1 << 31))
        model = DetectorModel(cfg, case_rng)
        # break the zero-bias symmetry so ReLU margins can be satisfied
        for name, p in model.params.items():
            if name.endswith(".b"):
                p.data[...] = case_rng.normal(scale=0.3, size=p.data.shape)
        image = case_rng.uniform(0.2, 0.8, size=(cfg.image_h, cfg.image_w))
        rois = []
        for _ in range(3):
            x1 = case_rng.uniform(0.0, 1.5)
            y1 = case_rng.uniform(0.0, 1.5)
            rois.append(Box(x1, y1, x1 + case_rng.uniform(1.5, 2.5),
                            y1 + case_rng.uniform(1.5, 2.5)))
        n_anchors = (cfg.image_h // 4) * (cfg.image_w // 4)
        sel = case_rng.choice(n_anchors, size=6, replace=False)
        sel.sort()
        anchor_labels = case_rng.integers(0, 2, size=6)
        anchor_targets = case_rng.normal(size=(6, 4)) * 0.5
        roi_labels = case_rng.integers(0, 2, size=3)
        roi_targets = case_rng.normal(size=(3, 4)) * 0.5
        centers = Centers(case_rng.normal(size=(2, cfg.feature_dim)))
        return model, image, rois, sel, anchor_labels, anchor_targets, roi_labels, roi_targets, centers

    def safe(case) -> bool:
        model, image, rois, sel, _, at, _, rt, _ = case
        if not _network_margins_ok(model, image, rois, cfg.roi_size):
            return False
        # keep SmoothL1 residuals off the |x| = 1 elbow
        fm, _ = model.forward_trunk(image)
        _, rpn_deltas, _ = model.forward_rpn(fm)
        r1 = np.abs(rpn_deltas[sel] - at)
        pooled = np.stack(
            [layers.roi_pool_forward(fm, b, cfg.roi_size)[0].ravel() for b in rois]
        )
        _, _, head_deltas, _ = model.forward_head(pooled)
        r2 = np.abs(head_deltas - rt)
        margin = 10.0 * KINK_MARGIN
        return bool(np.all(np.abs(r1 - 1.0) > margin) and np.all(np.abs(r2 - 1.0) > margin))

    model, image, rois, sel, anchor_labels, anchor_targets, roi_labels, roi_targets, centers = (
        _draw_safe(draw, safe, limit=40)
    )

    def loss_and_grads(compute_grads: bool) -> float:
        model.zero_grads()
        fm, trunk_cache = model.forward_trunk(image)
        rpn_logits, rpn_deltas, rpn_cache = model.forward_rpn(fm)
        cls_loss, _, g_logits = softmax_ce(rpn_logits[sel], anchor_labels)
        mask = anchor_labels.astype(np.float64)
        reg_loss, g_deltas = smooth_l1(rpn_deltas[sel], anchor_targets, mask)

        pooled_rows, caches = [], []
        for roi in rois:
            pooled, cache = layers.roi_pool_forward(fm, roi, cfg.roi_size)
            pooled_rows.append(pooled.ravel())
            caches.append(cache)
        pooled = np.stack(pooled_rows)
        feats, logits, deltas, head_cache = model.forward_head(pooled)
        report, grads = multitask_loss(
            logits, roi_labels, deltas, roi_targets,
            roi_labels.astype(np.float64), feats, centers, weights,
        )
        total = cls_loss + weights.lam * reg_loss + report.total
        if compute_grads:
            dlog = np.zeros_like(rpn_logits)
            dlog[sel] = g_logits
            ddel = np.zeros_like(rpn_deltas)
            ddel[sel] = weights.lam * g_deltas
            dfm = model.backward_rpn(dlog, ddel, rpn_cache)
            dpooled = model.backward_head(grads.logits, grads.deltas, grads.features, head_cache)
            for row in range(len(rois)):
                dfm += layers.roi_pool_backward(
                    dpooled[row].reshape(cfg.roi_size, cfg.roi_size, -1), caches[row]
                )
            model.backward_trunk(dfm, trunk_cache)
        return float(total)

    loss_and_grads(True)
    analytic = {name: p.grad.copy() for name, p in model.params.items()}

    names = sorted(model.params)
    sizes = np.array([model.params[n].data.size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    worst = 0.0
    bounds = np.cumsum(sizes)
    for pick in sorted(int(v) for v in picks):
        t = int(np.searchsorted(bounds, pick, side="right"))
        flat = pick - (0 if t == 0 else int(bounds[t - 1]))
        arr = model.params[names[t]].data
        numeric = _fd(lambda: loss_and_grads(False), arr, flat)
        worst = max(worst, _rel_err(float(analytic[names[t]].flat[flat]), numeric))
    return worst


# -- suite -------------------------------------------------------------------------


def run_all(seed: int = 0, cases: int = CASES) -> list[CheckResult]:
    """Run every gradient check ``cases`` times; returns one result per check."""
    checks: list[tuple[str, float, Callable[[np.random.Generator], float]]] = [
        ("loss/softmax_ce", LOSS_TOL, _check_softmax_ce),
        ("loss/center", LOSS_TOL, _check_center),
        ("loss/smooth_l1", LOSS_TOL, _check_smooth_l1),
        ("loss/multitask", LOSS_TOL, _check_multitask),
        ("layer/conv3x3", NETWORK_TOL, lambda r: _check_conv(r, 3)),
        ("layer/conv1x1", NETWORK_TOL, lambda r: _check_conv(r, 1)),
        ("layer/relu", NETWORK_TOL, _check_relu),
        ("layer/maxpool2", NETWORK_TOL, _check_maxpool),
        ("layer/fc", NETWORK_TOL, _check_fc),
        ("layer/roi_pool", NETWORK_TOL, _check_roi_pool),
        ("network/full", NETWORK_TOL, _check_network),
    ]
    results = []
    for check_idx, (name, tol, fn) in enumerate(checks):
        rng = np.random.default_rng([seed, check_idx])
        worst = 0.0
        for _ in range(cases):
            worst = max(worst, fn(rng))
        results.append(CheckResult(name, cases, worst, tol))
    return results


def format_results(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'check':<18} {'cases':>5} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<18} {r.cases:>5} {r.max_rel_err:>12.3e} {r.tol:>8.0e}  {status}")
    if elapsed is not None:
        lines.append(f"elapsed: {elapsed:.2f}s")
    return "\n".join(lines)
