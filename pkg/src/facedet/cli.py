"""Command-line surface tying the pipeline together.

Subcommands: gen-data, train, detect, eval-fddb, eval-wider, gradcheck,
ablate. Exit codes: 0 success, 1 usage error, 2 data/format error, 3 check
failure. Every command is reproducible: identical flags and seed produce
byte-identical output files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .ablate import AXES, evaluate_model, run_ablation
from .config import (
    Config,
    ConfigError,
    apply_overrides,
    parse_config,
    serialize_config,
    validate_config,
)
from .detector import detect_dataset, restore_train_state
from .evaluation import (
    FormatError,
    continuous_roc,
    discrete_roc,
    ellipse_to_box,
    format_detections,
    parse_box_annotations,
    parse_detections,
    parse_ellipse_annotations,
    pr_csv,
    pr_curve_ap,
    roc_csv,
    tpr_at_fp,
)
from .plotting import (
    save_ablation_figure,
    save_loss_figure,
    save_pr_figure,
    save_roc_figure,
)
from .synthdata import SceneSpec, load_dataset, write_dataset
from .training import run_training, write_loss_log

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--steps", type=int, help="override training step count")
    p.add_argument("--mu", type=float, help="center-loss weight")
    p.add_argument("--lambda", dest="lam", type=float, help="regression weight")
    p.add_argument("--ohem", choices=("on", "off"), help="hard example mining")
    p.add_argument("--scales", help="comma-separated scale set, e.g. 0.5,1,2")
    p.add_argument("--score-threshold", type=float, help="detection score cutoff")
    p.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="override any config field",
    )


def _build_config(args) -> Config:
    cfg = Config()
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text(), cfg)
    direct = {}
    for name in ("seed", "steps", "mu", "lam", "score_threshold"):
        value = getattr(args, name, None)
        if value is not None:
            direct[name] = str(value)
    if getattr(args, "ohem", None) is not None:
        direct["ohem"] = "true" if args.ohem == "on" else "false"
        direct["ohem_rpn"] = direct["ohem"]
    if getattr(args, "scales", None) is not None:
        direct["scales"] = args.scales
    cfg = apply_overrides(cfg, direct)
    pairs = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value
    cfg = apply_overrides(cfg, pairs)
    return validate_config(cfg)


def _scene_spec(cfg: Config) -> SceneSpec:
    return SceneSpec(
        image_w=cfg.image_w,
        image_h=cfg.image_h,
        n_faces=(cfg.n_faces_min, cfg.n_faces_max),
        face_size=(cfg.face_min, cfg.face_max),
        noise_sigma=cfg.noise_sigma,
        distractor_count=(cfg.distractors_min, cfg.distractors_max),
        seed=cfg.seed,
    )


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    manifest = write_dataset(_scene_spec(cfg), args.n_images, args.out)
    print(
        f"wrote {len(manifest.names)} images ({manifest.total_faces} faces) to {args.out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    data = [(img, gts) for _, img, gts in load_dataset(args.data)]
    out = Path(args.out)
    t0 = time.monotonic()
    state, history = run_training(
        cfg, data, out_dir=out, checkpoint_every=args.checkpoint_every
    )
    if history:
        save_loss_figure(history, out / "loss_curve.png")
        last = history[-1]
        print(
            f"trained {state.step} steps in {time.monotonic() - t0:.1f}s; "
            f"final objective {last['objective']:.4f}"
        )
    else:
        print("trained 0 steps; wrote the initialization checkpoint")
    return EXIT_OK


def _load_model(args):
    model_path = Path(args.model)
    if model_path.is_dir():
        ckpt = model_path / "model.ckpt"
        cfg_path = model_path / "config.txt"
    else:
        ckpt = model_path
        cfg_path = model_path.parent / "config.txt"
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise FileNotFoundError(f"no config.txt next to {ckpt}; pass --config")
    cfg = validate_config(parse_config(cfg_path.read_text()))
    return restore_train_state(cfg, ckpt), cfg


def cmd_detect(args) -> int:
    state, cfg = _load_model(args)
    if args.scales is not None:
        scales = tuple(float(s) for s in args.scales.split(",") if s.strip())
    else:
        scales = tuple(cfg.scales)
    if args.score_threshold is not None:
        cfg = apply_overrides(cfg, {"score_threshold": str(args.score_threshold)})
    entries = load_dataset(args.data)
    use_scales = scales if len(scales) > 1 or scales != (1.0,) else None
    dets = detect_dataset(
        state.model,
        state.centers,
        [img for _, img, _ in entries],
        cfg.score_threshold,
        cfg,
        scales=use_scales,
        jobs=args.jobs,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_detections([(name, d) for (name, _, _), d in zip(entries, dets)]))
    print(f"wrote {sum(len(d) for d in dets)} detections for {len(entries)} images to {out}")
    return EXIT_OK


def _eval_common_outputs(out_dir: Path, summary: dict) -> None:
    _write_json(out_dir / "summary.json", summary)


def cmd_eval_fddb(args) -> int:
    annotations = parse_ellipse_annotations(Path(args.annotations).read_text())
    detections = parse_detections(Path(args.detections).read_text())
    unknown = sorted(set(detections) - set(annotations))
    if unknown:
        raise FormatError(None, f"detections for unannotated images: {unknown[:3]}")
    samples = [
        (detections.get(name, []), [ellipse_to_box(e) for e in ellipses])
        for name, ellipses in annotations.items()
    ]
    disc = discrete_roc(samples, args.iou)
    cont = continuous_roc(samples, args.iou)
    _, ap = pr_curve_ap(samples, args.iou)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "roc_discrete.csv").write_text(roc_csv(disc))
    (out / "roc_continuous.csv").write_text(roc_csv(cont))
    summary = {
        "total_gts": sum(len(g) for _, g in samples),
        "total_detections": sum(len(d) for d, _ in samples),
        "iou_threshold": args.iou,
        "fp_count": args.fp_count,
        "discrete_tpr_at_fp": tpr_at_fp(disc, args.fp_count),
        "continuous_tpr_at_fp": tpr_at_fp(cont, args.fp_count),
        "average_precision": ap,
    }
    _eval_common_outputs(out, summary)
    save_roc_figure(disc, cont, out / "roc.png", fp_count=args.fp_count)
    print(
        f"discrete TPR@{args.fp_count}fp = {summary['discrete_tpr_at_fp']:.4f}, "
        f"continuous = {summary['continuous_tpr_at_fp']:.4f}, AP = {ap:.4f}"
    )
    return EXIT_OK


def cmd_eval_wider(args) -> int:
    annotations = parse_box_annotations(Path(args.annotations).read_text())
    detections = parse_detections(Path(args.detections).read_text())
    unknown = sorted(set(detections) - set(annotations))
    if unknown:
        raise FormatError(None, f"detections for unannotated images: {unknown[:3]}")
    samples = [
        (detections.get(name, []), boxes) for name, boxes in annotations.items()
    ]
    points, ap = pr_curve_ap(samples, args.iou)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pr_curve.csv").write_text(pr_csv(points))
    summary = {
        "total_gts": sum(len(g) for _, g in samples),
        "total_detections": sum(len(d) for d, _ in samples),
        "iou_threshold": args.iou,
        "average_precision": ap,
    }
    _eval_common_outputs(out, summary)
    save_pr_figure(points, ap, out / "pr_curve.png")
    print(f"AP = {ap:.4f} over {summary['total_gts']} ground truths")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.monotonic()
    results = gradcheck_mod.run_all(seed=args.seed if args.seed is not None else 0)
    elapsed = time.monotonic() - t0
    print(gradcheck_mod.format_results(results, elapsed))
    if args.out:
        lines = ["check,cases,max_rel_err,tol,passed"]
        lines += [
            f"{r.name},{r.cases},{r.max_rel_err!r},{r.tol!r},{str(r.passed).lower()}"
            for r in results
        ]
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    train_data = [(img, gts) for _, img, gts in load_dataset(args.data)]
    heldout = [(img, gts) for _, img, gts in load_dataset(args.heldout)]
    report = run_ablation(cfg, args.axis, train_data, heldout, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {k: v for k, v in report.items() if k != "runs"}
    summary["runs"] = [
        {k: v for k, v in run.items() if k != "history"} for run in report["runs"]
    ]
    _write_json(out / "ablate_summary.json", summary)
    for run in report["runs"]:
        tag = run["name"].replace("=", "_").replace(".", "p")
        write_loss_log(out / f"losses_{tag}.csv", run["history"])
    save_ablation_figure(report, out / "ablate.png")
    lines = [
        f"{run['name']}: AP {run['ap']:.4f}, face feature trace "
        f"{run['face_feature_trace']:.4f}"
        for run in report["runs"]
    ]
    print("\n".join(lines))
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="facedet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="write a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-images", type=int, required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True, help="dataset dir from gen-data")
    p.add_argument("--out", type=Path, required=True, help="output dir for model + logs")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="run detection, write a detection file")
    p.add_argument("--model", type=Path, required=True, help="checkpoint file or train dir")
    p.add_argument("--config", type=Path, help="config file (default: next to model)")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scales", help="comma-separated scale set; 1.0 = single scale")
    p.add_argument("--score-threshold", type=float)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("eval-fddb", help="score detections against ellipse annotations")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--fp-count", type=int, default=2000)
    p.set_defaults(fn=cmd_eval_fddb)

    p = sub.add_parser("eval-wider", help="score detections against box annotations")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(fn=cmd_eval_wider)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="optional CSV report path")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="paired comparison runs")
    _add_config_flags(p)
    p.add_argument("--axis", choices=AXES, default="mu")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--heldout", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code in (None, 0):
            return EXIT_OK
        return int(e.code)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as e:
        print(f"facedet: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"facedet: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"facedet: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
