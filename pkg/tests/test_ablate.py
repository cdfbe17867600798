from dataclasses import replace

import numpy as np
import pytest

from facedet.ablate import evaluate_model, feature_compactness, run_ablation
from facedet.config import Config, validate_config
from facedet.detector import make_train_state, train_step
from facedet.synthdata import SceneSpec, generate_scene

CFG = validate_config(
    replace(
        Config(),
        image_w=32,
        image_h=32,
        trunk_channels=(4, 8),
        rpn_channels=8,
        hidden_dim=16,
        feature_dim=8,
        roi_size=4,
        face_min=8.0,
        face_max=16.0,
        steps=4,
        multiscale_train=False,
        scales=(1.0,),
    )
)


def scenes(seed, n):
    spec = SceneSpec(image_w=32, image_h=32, n_faces=(1, 2), face_size=(8.0, 16.0), seed=seed)
    return [generate_scene(spec, i) for i in range(n)]


class TestFeatureCompactness:
    def test_reports_both_classes(self):
        state = make_train_state(CFG)
        data = scenes(0, 3)
        for img, gts in data:
            state, _ = train_step(state, [(img, gts)], CFG)
        out = feature_compactness(state, data, CFG)
        assert out["face_count"] > 0
        assert out["face_feature_trace"] >= 0.0
        assert set(out) == {
            "face_feature_trace", "face_count",
            "background_feature_trace", "background_count",
        }

    def test_deterministic(self):
        state = make_train_state(CFG)
        data = scenes(1, 2)
        a = feature_compactness(state, data, CFG)
        b = feature_compactness(state, data, CFG)
        assert a == b


class TestEvaluateModel:
    def test_ap_in_range(self):
        state = make_train_state(CFG)
        data = scenes(2, 3)
        _, ap = evaluate_model(state, data, CFG)
        assert 0.0 <= ap <= 1.0


class TestRunAblation:
    def test_mu_axis_report_structure(self):
        report = run_ablation(CFG, "mu", scenes(3, 4), scenes(4, 2))
        assert report["axis"] == "mu"
        names = [r["name"] for r in report["runs"]]
        assert names == ["mu=0", f"mu={CFG.mu}"]
        assert "ap_delta" in report
        for run in report["runs"]:
            assert len(run["history"]) == CFG.steps
            assert 0.0 <= run["ap"] <= 1.0

    def test_unknown_axis(self):
        with pytest.raises(ValueError, match="axis"):
            run_ablation(CFG, "bogus", scenes(3, 2), scenes(4, 1))

    def test_scales_axis_names(self):
        cfg = validate_config(replace(CFG, multiscale_train=True, scales=(0.5, 1.0)))
        report = run_ablation(cfg, "scales", scenes(5, 3), scenes(6, 2))
        assert [r["name"] for r in report["runs"]] == ["single-scale", "multi-scale"]
