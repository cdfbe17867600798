import numpy as np
import pytest

from facedet.geometry import Box, Delta, iou
from facedet.matching import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    LabeledSample,
    OhemConfig,
    balanced_random_select,
    label_anchors,
    label_proposals,
    ohem_select,
)


def random_box(rng, extent, min_size=2.0, max_size=None):
    max_size = max_size or extent / 2
    w = rng.uniform(min_size, max_size)
    h = rng.uniform(min_size, max_size)
    x1 = rng.uniform(-4.0, extent - w + 4.0)
    y1 = rng.uniform(-4.0, extent - h + 4.0)
    return Box(x1, y1, x1 + w, y1 + h)


def brute_force_anchor_labels(anchors, gts, w, h, pos_iou=0.7, neg_iou=0.3):
    """Scalar-loop re-derivation of the anchor labeling rules."""
    inside = [
        a.x1 >= 0 and a.y1 >= 0 and a.x2 <= w and a.y2 <= h for a in anchors
    ]
    labels = [IGNORE] * len(anchors)
    if not gts:
        return [NEGATIVE if ins else IGNORE for ins in inside]
    for i, a in enumerate(anchors):
        if not inside[i]:
            continue
        best = max(iou(a, g) for g in gts)
        if best > pos_iou:
            labels[i] = POSITIVE
        elif best < neg_iou:
            labels[i] = NEGATIVE
    for g in gts:
        best_i, best_v = None, -1.0
        for i, a in enumerate(anchors):
            if not inside[i]:
                continue
            v = iou(a, g)
            if v > best_v:
                best_i, best_v = i, v
        if best_i is not None:
            labels[best_i] = POSITIVE
    return labels


class TestLabelAnchors:
    def _grid(self, rng=None):
        # stride-4 grid over a 32x32 image, 8x8 anchors, fully in-image cells only
        anchors = []
        for j in range(8):
            for i in range(8):
                cx, cy = (i + 0.5) * 4, (j + 0.5) * 4
                anchors.append(Box(cx - 4, cy - 4, cx + 4, cy + 4))
        return anchors

    def test_no_gts_all_inside_negative(self):
        anchors = self._grid() + [Box(-6, -6, 2, 2)]
        labeled = label_anchors(anchors, [], 32, 32)
        for s in labeled:
            a = anchors[s.index]
            inside = a.x1 >= 0 and a.y1 >= 0 and a.x2 <= 32 and a.y2 <= 32
            assert s.label == (NEGATIVE if inside else IGNORE)

    def test_identical_anchor_positive_with_zero_delta(self):
        anchors = self._grid()
        gt = anchors[27]
        labeled = label_anchors(anchors, [gt], 32, 32)
        s = labeled[27]
        assert s.label == POSITIVE
        assert s.matched_gt == 0
        assert s.target_delta.as_tuple() == (0.0, 0.0, 0.0, 0.0)

    def test_best_anchor_claimed_below_pos_threshold(self):
        # a gt placed between anchor centers never reaches IoU 0.7 but must
        # still claim its best anchor
        anchors = self._grid()
        gt = Box(8.0, 8.0, 17.0, 16.5)
        best = max(iou(a, gt) for a in anchors)
        assert best < 0.7
        labeled = label_anchors(anchors, [gt], 32, 32)
        positives = [s for s in labeled if s.label == POSITIVE]
        assert positives and any(s.matched_gt == 0 for s in positives)

    def test_outside_anchors_ignored(self):
        anchors = [Box(-2, 0, 6, 8), Box(0, 0, 8, 8)]
        labeled = label_anchors(anchors, [Box(0, 0, 8, 8)], 32, 32)
        assert labeled[0].label == IGNORE
        assert labeled[1].label == POSITIVE

    def test_matches_brute_force_on_seeded_scenes(self):
        rng = np.random.default_rng(77)
        anchors = self._grid()
        for _ in range(200):
            gts = [random_box(rng, 32.0, 4.0, 20.0) for _ in range(int(rng.integers(0, 4)))]
            gts = [Box(max(g.x1, 0), max(g.y1, 0), min(g.x2, 32), min(g.y2, 32)) for g in gts]
            gts = [g for g in gts if g.area > 1.0]
            got = [s.label for s in label_anchors(anchors, gts, 32, 32)]
            want = brute_force_anchor_labels(anchors, gts, 32, 32)
            assert got == want

    def test_every_gt_gets_a_positive(self):
        # face-like boxes (near-square, barely overlapping) as the generator
        # produces them; each must own at least one positive anchor
        rng = np.random.default_rng(78)
        anchors = self._grid()
        for _ in range(300):
            gts = []
            for _ in range(int(rng.integers(1, 4))):
                for _ in range(50):
                    h = rng.uniform(8, 16)
                    w = h * rng.uniform(0.7, 0.95)
                    x1 = rng.uniform(0, 32 - w)
                    y1 = rng.uniform(0, 32 - h)
                    cand = Box(x1, y1, x1 + w, y1 + h)
                    if all(iou(cand, g) < 0.2 for g in gts):
                        gts.append(cand)
                        break
            labeled = label_anchors(anchors, gts, 32, 32)
            claimed = {s.matched_gt for s in labeled if s.label == POSITIVE}
            for g in range(len(gts)):
                assert g in claimed

    def test_partition_of_in_image_anchors(self):
        rng = np.random.default_rng(79)
        anchors = self._grid() + [Box(-3, -3, 5, 5)]
        gts = [Box(4, 4, 14, 14)]
        labeled = label_anchors(anchors, gts, 32, 32)
        assert len(labeled) == len(anchors)
        for s in labeled:
            assert s.label in (POSITIVE, NEGATIVE, IGNORE)
            assert (s.label == POSITIVE) == (s.matched_gt is not None)
            assert (s.label == POSITIVE) == (s.target_delta is not None)


class TestLabelProposals:
    def test_exact_match_positive(self):
        gt = Box(2, 2, 12, 12)
        (s,) = label_proposals([gt], [gt])
        assert s.label == POSITIVE and s.matched_gt == 0

    def test_easy_background_ignored(self):
        # max IoU 0.05 falls below the [0.1, 0.5) negative window
        gt = Box(0, 0, 10, 10)
        prop = Box(9.0, 9.0, 19.0, 19.0)
        assert iou(prop, gt) < 0.1
        (s,) = label_proposals([prop], [gt])
        assert s.label == IGNORE

    def test_no_gts_all_ignore(self):
        labeled = label_proposals([Box(0, 0, 5, 5)], [])
        assert [s.label for s in labeled] == [IGNORE]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(101)
        for _ in range(200):
            gts = [random_box(rng, 40.0, 5.0) for _ in range(int(rng.integers(1, 4)))]
            props = [random_box(rng, 40.0, 3.0) for _ in range(30)]
            labeled = label_proposals(props, gts)
            for s, p in zip(labeled, props):
                best = max(iou(p, g) for g in gts)
                if best >= 0.5:
                    want = POSITIVE
                elif 0.1 <= best < 0.5:
                    want = NEGATIVE
                else:
                    want = IGNORE
                assert s.label == want
                if want == POSITIVE:
                    ious = [iou(p, g) for g in gts]
                    assert s.matched_gt == int(np.argmax(ious))


def ohem_oracle(samples, losses, batch_size):
    """Stable-sort prefix oracle: per class, order by (-loss, index), take k."""
    k = batch_size // 2
    out = []
    for label in (POSITIVE, NEGATIVE):
        entries = [(s.index, losses[i]) for i, s in enumerate(samples) if s.label == label]
        entries.sort(key=lambda e: (-e[1], e[0]))
        out.extend(i for i, _ in entries[:k])
    return out


_DELTA = Delta(0, 0, 0, 0)


def make_samples(rng, n_pos, n_neg, n_ignore):
    labels = [POSITIVE] * n_pos + [NEGATIVE] * n_neg + [IGNORE] * n_ignore
    rng.shuffle(labels)
    return [
        LabeledSample(i, POSITIVE, 0, _DELTA) if label == POSITIVE else LabeledSample(i, label)
        for i, label in enumerate(labels)
    ]


class TestOhem:
    def test_full_balanced_batch(self):
        rng = np.random.default_rng(1)
        samples = make_samples(rng, 64, 64, 10)
        losses = rng.uniform(size=len(samples))
        sel = ohem_select(samples, losses, OhemConfig(128))
        assert len(sel) == 128
        pos_set = {s.index for s in samples if s.label == POSITIVE}
        assert sum(1 for i in sel if i in pos_set) == 64

    def test_per_class_caps_independent(self):
        rng = np.random.default_rng(2)
        samples = make_samples(rng, 10, 500, 0)
        losses = rng.uniform(size=len(samples))
        sel = ohem_select(samples, losses, OhemConfig(128))
        pos_set = {s.index for s in samples if s.label == POSITIVE}
        assert sum(1 for i in sel if i in pos_set) == 10
        assert sum(1 for i in sel if i not in pos_set) == 64

    def test_equal_losses_prefix_by_index(self):
        rng = np.random.default_rng(3)
        samples = make_samples(rng, 6, 6, 0)
        sel = ohem_select(samples, np.zeros(12), OhemConfig(8))
        pos_sorted = sorted(s.index for s in samples if s.label == POSITIVE)
        neg_sorted = sorted(s.index for s in samples if s.label == NEGATIVE)
        assert sel == pos_sorted[:4] + neg_sorted[:4]

    def test_matches_oracle_on_seeded_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            samples = make_samples(
                rng,
                int(rng.integers(0, 40)),
                int(rng.integers(0, 200)),
                int(rng.integers(0, 30)),
            )
            if not any(s.label in (POSITIVE, NEGATIVE) for s in samples):
                continue
            losses = rng.uniform(size=len(samples))
            # inject ties to exercise the index tie-break
            losses = np.round(losses, 1)
            batch = int(rng.integers(1, 65)) * 2
            assert ohem_select(samples, losses, OhemConfig(batch)) == ohem_oracle(
                samples, losses, batch
            )

    def test_never_selects_ignore(self):
        rng = np.random.default_rng(5)
        samples = make_samples(rng, 5, 5, 50)
        losses = rng.uniform(size=60)
        sel = set(ohem_select(samples, losses, OhemConfig(128)))
        ignore = {s.index for s in samples if s.label == IGNORE}
        assert not (sel & ignore)

    def test_untrainable_batch_raises(self):
        rng = np.random.default_rng(6)
        samples = make_samples(rng, 0, 0, 8)
        with pytest.raises(ValueError, match="untrainable"):
            ohem_select(samples, np.zeros(8), OhemConfig(4))

    def test_misaligned_losses_rejected(self):
        rng = np.random.default_rng(7)
        samples = make_samples(rng, 2, 2, 0)
        with pytest.raises(ValueError):
            ohem_select(samples, np.zeros(3), OhemConfig(4))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OhemConfig(3)
        with pytest.raises(ValueError):
            OhemConfig(0)

    def test_random_fallback_balanced_and_capped(self):
        rng = np.random.default_rng(8)
        samples = make_samples(rng, 30, 300, 5)
        sel = balanced_random_select(samples, np.random.default_rng(0), OhemConfig(64))
        pos_set = {s.index for s in samples if s.label == POSITIVE}
        assert sum(1 for i in sel if i in pos_set) == 30
        assert sum(1 for i in sel if i not in pos_set) == 32
