import json
from dataclasses import replace
from pathlib import Path

import pytest

from facedet.cli import main
from facedet.config import (
    Config,
    ConfigError,
    apply_overrides,
    config_digest,
    parse_config,
    serialize_config,
    validate_config,
)

DATA = Path(__file__).parent / "data" / "fddb_fixture"


class TestConfig:
    def test_serialize_parse_round_trip(self):
        cfg = replace(Config(), mu=0.125, scales=(0.25, 1.0, 3.0), ohem=False, seed=99)
        text = serialize_config(cfg)
        assert parse_config(text) == cfg
        assert serialize_config(parse_config(text)) == text

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# a comment\n\nmu=0.5  # trailing\n")
        assert cfg.mu == 0.5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key: muu"):
            parse_config("muu=1\n")

    def test_bad_value_names_field(self):
        with pytest.raises(ConfigError, match="steps"):
            parse_config("steps=abc\n")

    def test_bool_strictness(self):
        with pytest.raises(ConfigError, match="ohem"):
            parse_config("ohem=yes\n")

    def test_tuple_parsing(self):
        cfg = parse_config("scales=0.5, 1, 2\n")
        assert cfg.scales == (0.5, 1.0, 2.0)

    def test_validation_names_fields(self):
        with pytest.raises(ConfigError, match="head_batch"):
            validate_config(replace(Config(), head_batch=7))
        with pytest.raises(ConfigError, match="anchor_stride"):
            validate_config(replace(Config(), anchor_stride=8))
        with pytest.raises(ConfigError, match="scales"):
            validate_config(replace(Config(), scales=(2.0, 1.0)))
        with pytest.raises(ConfigError, match="mu"):
            validate_config(replace(Config(), mu=-0.5))

    def test_digest_changes_with_values(self):
        assert config_digest(Config()) != config_digest(replace(Config(), mu=0.5))
        assert len(config_digest(Config())) == 32

    def test_apply_overrides(self):
        cfg = apply_overrides(Config(), {"mu": "0.25", "ohem": "false"})
        assert cfg.mu == 0.25 and cfg.ohem is False


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    code = main(
        [
            "gen-data",
            "--out", str(root / "train"),
            "--n-images", "6",
            "--seed", "3",
            "--set", "image_w=32", "--set", "image_h=32",
            "--set", "face_min=8", "--set", "face_max=16",
        ]
    )
    assert code == 0
    return root


TINY_NET = [
    "--set", "trunk_channels=4,8",
    "--set", "rpn_channels=8",
    "--set", "hidden_dim=16",
    "--set", "feature_dim=8",
    "--set", "roi_size=4",
    "--set", "image_w=32", "--set", "image_h=32",
    "--set", "face_min=8", "--set", "face_max=16",
    "--set", "multiscale_train=false",
    "--set", "scales=1.0",
]


class TestCliExitCodes:
    def test_usage_error_is_1(self, capsys):
        assert main(["train"]) == 1  # missing required flags
        assert main(["no-such-command"]) == 1

    def test_data_error_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("img\nnot_a_count\n")
        code = main(
            ["eval-fddb", "--annotations", str(bad), "--detections", str(bad),
             "--out", str(tmp_path / "out")]
        )
        assert code == 2

    def test_missing_file_is_2(self, tmp_path, capsys):
        code = main(
            ["eval-fddb", "--annotations", str(tmp_path / "none.txt"),
             "--detections", str(tmp_path / "none.txt"), "--out", str(tmp_path / "o")]
        )
        assert code == 2

    def test_bad_config_value_is_2(self, tmp_path, capsys):
        code = main(
            ["gen-data", "--out", str(tmp_path / "d"), "--n-images", "1",
             "--set", "mu=-1"]
        )
        assert code == 2


class TestGenData:
    def test_outputs_exist(self, small_dataset):
        d = small_dataset / "train"
        assert (d / "manifest.json").exists()
        assert (d / "annotations_boxes.txt").exists()
        assert (d / "annotations_ellipses.txt").exists()
        manifest = json.loads((d / "manifest.json").read_text())
        assert len(manifest["images"]) == 6

    def test_rerun_byte_identical(self, tmp_path):
        argv = [
            "gen-data", "--n-images", "4", "--seed", "11",
            "--set", "image_w=32", "--set", "image_h=32",
            "--set", "face_min=8", "--set", "face_max=16",
        ]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


class TestTrainDetectEval:
    def test_zero_step_checkpoint_is_initialization(self, small_dataset, tmp_path):
        out = tmp_path / "run0"
        code = main(
            ["train", "--data", str(small_dataset / "train"), "--out", str(out),
             "--steps", "0", "--seed", "3"] + TINY_NET
        )
        assert code == 0
        from facedet.detector import make_train_state, restore_train_state
        from facedet.config import parse_config as pc

        cfg = validate_config(pc((out / "config.txt").read_text()))
        restored = restore_train_state(cfg, out / "model.ckpt")
        fresh = make_train_state(cfg)
        for k, p in fresh.model.params.items():
            assert (restored.model.params[k].data == p.data).all()

    def test_train_detect_eval_round_trip(self, small_dataset, tmp_path):
        out = tmp_path / "run"
        code = main(
            ["train", "--data", str(small_dataset / "train"), "--out", str(out),
             "--steps", "5", "--seed", "3"] + TINY_NET
        )
        assert code == 0
        assert (out / "loss_log.csv").exists()
        assert (out / "loss_curve.png").exists()

        dets = tmp_path / "dets.txt"
        code = main(
            ["detect", "--model", str(out), "--data", str(small_dataset / "train"),
             "--out", str(dets), "--scales", "1.0", "--score-threshold", "0.0"]
        )
        assert code == 0
        assert dets.exists()

        ev = tmp_path / "eval"
        code = main(
            ["eval-fddb",
             "--annotations", str(small_dataset / "train" / "annotations_ellipses.txt"),
             "--detections", str(dets), "--out", str(ev)]
        )
        assert code == 0
        summary = json.loads((ev / "summary.json").read_text())
        assert set(summary) >= {
            "average_precision", "discrete_tpr_at_fp", "continuous_tpr_at_fp"
        }
        assert (ev / "roc_discrete.csv").exists()
        assert (ev / "roc.png").exists()

        evw = tmp_path / "eval_wider"
        code = main(
            ["eval-wider",
             "--annotations", str(small_dataset / "train" / "annotations_boxes.txt"),
             "--detections", str(dets), "--out", str(evw)]
        )
        assert code == 0
        assert (evw / "pr_curve.csv").exists()
        assert (evw / "pr_curve.png").exists()

    def test_train_rerun_byte_identical(self, small_dataset, tmp_path):
        argv = [
            "train", "--data", str(small_dataset / "train"),
            "--steps", "3", "--seed", "5",
        ] + TINY_NET
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        for name in ("model.ckpt", "loss_log.csv", "config.txt", "loss_curve.png"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes(), name


class TestEvalFixture:
    def test_fixture_summary_constants(self, tmp_path):
        out = tmp_path / "ev"
        code = main(
            ["eval-fddb", "--annotations", str(DATA / "ellipses.txt"),
             "--detections", str(DATA / "detections.txt"), "--out", str(out)]
        )
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["discrete_tpr_at_fp"] == pytest.approx(4 / 6, abs=1e-12)
        assert summary["continuous_tpr_at_fp"] == pytest.approx(0.6, abs=1e-12)
        assert summary["average_precision"] == pytest.approx(0.6, abs=1e-12)

    def test_fp_count_flag(self, tmp_path):
        out = tmp_path / "ev0"
        code = main(
            ["eval-fddb", "--annotations", str(DATA / "ellipses.txt"),
             "--detections", str(DATA / "detections.txt"), "--out", str(out),
             "--fp-count", "0"]
        )
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["discrete_tpr_at_fp"] == pytest.approx(2 / 6, abs=1e-12)

    def test_eval_rerun_byte_identical(self, tmp_path):
        for tag in ("a", "b"):
            assert main(
                ["eval-fddb", "--annotations", str(DATA / "ellipses.txt"),
                 "--detections", str(DATA / "detections.txt"),
                 "--out", str(tmp_path / tag)]
            ) == 0
        for name in ("summary.json", "roc_discrete.csv", "roc_continuous.csv", "roc.png"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes(), name

    def test_wider_fixture_ap(self, tmp_path):
        out = tmp_path / "w"
        code = main(
            ["eval-wider", "--annotations", str(DATA / "boxes.txt"),
             "--detections", str(DATA / "detections.txt"), "--out", str(out)]
        )
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["average_precision"] == pytest.approx(0.6, abs=1e-12)


class TestGradcheckCommand:
    def test_passes_and_writes_report(self, tmp_path, capsys):
        report = tmp_path / "gradcheck.csv"
        code = main(["gradcheck", "--seed", "7", "--out", str(report)])
        assert code == 0
        out = capsys.readouterr().out
        assert "network/full" in out and "FAIL" not in out
        lines = report.read_text().strip().splitlines()
        assert lines[0].startswith("check,")
        assert all(line.endswith(",true") for line in lines[1:])
