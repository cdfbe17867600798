import numpy as np
import pytest

from facedet.geometry import Box, Detection
from facedet.pyramid import ScaleSet, merge_multiscale, pick_training_scale, resize_image


class TestScaleSet:
    def test_validation(self):
        with pytest.raises(ValueError):
            ScaleSet(())
        with pytest.raises(ValueError):
            ScaleSet((1.0, 0.5))
        with pytest.raises(ValueError):
            ScaleSet((-1.0, 1.0))
        assert len(ScaleSet((0.5, 1.0, 2.0))) == 3


class TestResize:
    def test_identity_scale(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(32, 48))
        out = resize_image(img, 1.0)
        assert out.shape == img.shape
        assert np.array_equal(out, img)

    def test_constant_image_stays_constant(self):
        img = np.full((24, 24), 0.37)
        for s in (0.5, 1.5, 2.0):
            out = resize_image(img, s)
            assert np.allclose(out, 0.37, atol=1e-12)

    def test_dims_snap_to_stride(self):
        img = np.zeros((64, 100))
        out = resize_image(img, 0.9)  # 57.6 -> 58 -> 56; 90 -> 88
        assert out.shape == (56, 88)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            resize_image(np.zeros((16, 16)), 0.2)
        with pytest.raises(ValueError):
            resize_image(np.zeros((16, 16)), -1.0)

    def test_round_trip_on_smooth_ramp(self):
        ys, xs = np.mgrid[0:64, 0:64]
        ramp = (xs + ys) / 126.0  # smooth gradient, dynamic range 1
        down = resize_image(ramp, 0.5)
        back = resize_image(down, 2.0)
        assert np.abs(back - ramp).max() < 0.02


class TestPickScale:
    def test_singleton(self):
        rng = np.random.default_rng(0)
        ss = ScaleSet((1.5,))
        assert all(pick_training_scale(rng, ss) == 1.5 for _ in range(10))

    def test_deterministic_given_seed(self):
        ss = ScaleSet((0.5, 1.0, 2.0))
        rng1, rng2 = np.random.default_rng(42), np.random.default_rng(42)
        s1 = [pick_training_scale(rng1, ss) for _ in range(50)]
        s2 = [pick_training_scale(rng2, ss) for _ in range(50)]
        assert s1 == s2

    def test_uniform_frequencies(self):
        # 3-sigma band around 1/3 for 10^4 draws
        ss = ScaleSet((0.5, 1.0, 2.0))
        rng = np.random.default_rng(7)
        n = 10_000
        draws = [pick_training_scale(rng, ss) for _ in range(n)]
        p = 1.0 / 3.0
        sigma = np.sqrt(p * (1 - p) / n)
        for s in ss.scales:
            freq = draws.count(s) / n
            assert abs(freq - p) < 3 * sigma


class TestMerge:
    def test_single_scale_equals_plain_nms(self):
        dets = [
            Detection(Box(0, 0, 10, 10), 0.9, 0),
            Detection(Box(1, 1, 11, 11), 0.8, 0),
            Detection(Box(30, 30, 40, 40), 0.7, 0),
        ]
        merged = merge_multiscale([(1.0, dets)], 0.3)
        assert [d.score for d in merged] == [0.9, 0.7]

    def test_coordinates_divided_by_scale(self):
        det = Detection(Box(10, 10, 20, 20), 0.5, 0)
        (out,) = merge_multiscale([(2.0, [det])], 0.3)
        assert out.box == Box(5, 5, 10, 10)

    def test_cross_scale_duplicate_suppressed(self):
        at_half = Detection(Box(5, 5, 10, 10), 0.6, 0)   # scale 0.5 frame
        at_double = Detection(Box(20, 20, 40, 40), 0.9, 1)  # scale 2.0 frame
        merged = merge_multiscale([(0.5, [at_half]), (2.0, [at_double])], 0.3)
        assert len(merged) == 1
        assert merged[0].score == 0.9
        assert merged[0].box == Box(10, 10, 20, 20)

    def test_unknown_scale_id_rejected(self):
        det = Detection(Box(0, 0, 5, 5), 0.5, 3)
        with pytest.raises(ValueError, match="unknown scale id"):
            merge_multiscale([(1.0, [det])], 0.3)

    def test_unscaling_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            s = float(rng.uniform(0.1, 4.0))
            x1, y1 = rng.uniform(0, 50, size=2)
            w, h = rng.uniform(1, 20, size=2)
            det = Detection(Box(x1 * s, y1 * s, (x1 + w) * s, (y1 + h) * s), 0.5, 0)
            (out,) = merge_multiscale([(s, [det])], 0.3)
            assert out.box.x1 == pytest.approx(x1, abs=1e-12)
            assert out.box.y2 == pytest.approx(y1 + h, abs=1e-12)

    def test_merged_count_bounded_and_antichain(self):
        rng = np.random.default_rng(4)
        groups = []
        for sid, s in enumerate((0.5, 1.0, 2.0)):
            dets = []
            for _ in range(30):
                x1, y1 = rng.uniform(0, 40, size=2)
                w, h = rng.uniform(2, 12, size=2)
                dets.append(Detection(Box(x1, y1, x1 + w, y1 + h), float(rng.uniform(0, 1)), sid))
            groups.append((s, dets))
        merged = merge_multiscale(groups, 0.3)
        assert len(merged) <= 90
        from facedet.geometry import iou

        for i, a in enumerate(merged):
            for b in merged[i + 1 :]:
                assert iou(a.box, b.box) <= 0.3
