"""Command-line entry point: ``occdet <command> [options]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .checks import GRAD_TOLERANCE, LOSS_NAMES, gradient_suite
from .evaluation import (
    fppi_missrate_curve, get_subset, nms_sweep, sample_miss_rates, subset_filter,
)
from .geometry import Box
from .poroi import OcclusionUnitParams, RoIError, poroi_forward
from .synth import (
    PAPER_VARIANCES, SceneConfig, detections, generate_scenes, run_fig2b_experiment,
    scene_features, train_toy_regressor,
)

EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2


class CommandError(Exception):
    """Invalid input reported to the user with exit code 2."""


# ---------------------------------------------------------------------------
# Output


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def _table(report: dict, indent: str = "") -> list[str]:
    lines = []
    rows = report.get("rows")
    for key, value in report.items():
        if key == "rows":
            continue
        if isinstance(value, dict):
            lines.append(f"{indent}{key}:")
            lines.extend(_table(value, indent + "  "))
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            lines.append(f"{indent}{key}:")
            for item in value:
                lines.extend(_table(item, indent + "  "))
                lines.append("")
        else:
            lines.append(f"{indent}{key}: {_fmt(value)}")
    if rows:
        cols = list(rows[0])
        cells = [[_fmt(r[c]) for c in cols] for r in rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        lines.append(indent + "  ".join(c.ljust(w) for c, w in zip(cols, widths)))
        lines.extend(indent + "  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in cells)
    return lines


def render(report: dict, fmt: str) -> str:
    report = _plain(report)
    if fmt == "table":
        return "\n".join(_table(report)) + "\n"
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


def _emit(report: dict, args) -> None:
    text = render(report, args.format)
    if args.out and args.command != "synth":
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise CommandError(f"{args.out}: cannot write report: {exc.strerror or exc}") from exc
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands


def _load_eval_inputs(args, cfg):
    images = io.read_annotations(args.annotations)
    dets = io.read_detections(args.detections, {im.id for im in images})
    try:
        subset = get_subset(args.subset)
    except KeyError as exc:
        raise CommandError(exc.args[0]) from exc
    grouped = io.group_by_image(images, dets)
    return {k: (d, subset_filter(g, subset)) for k, (d, g) in grouped.items()}, subset


def cmd_eval(args, cfg: io.RunConfig) -> int:
    records, subset = _load_eval_inputs(args, cfg)
    if not any(not g.ignore for _, gts in records.values() for g in gts):
        raise CommandError(f"no ground truth falls in subset {subset.name}")
    curve = fppi_missrate_curve(records, cfg.match_iou, **cfg.mr2_kwargs())
    refs = np.logspace(np.log10(cfg.mr2_fppi_min), np.log10(cfg.mr2_fppi_max), cfg.mr2_points)
    samples = sample_miss_rates(curve.fppi, curve.miss_rate, refs)
    report = {"subset": subset.name, "images": len(records), "mr2_percent": curve.mr2}
    if args.format == "table":
        report["rows"] = [{"fppi": f, "miss_rate": m} for f, m in zip(refs, samples)]
    else:
        report["samples"] = {"fppi": refs, "miss_rate": samples}
        report["curve"] = {"fppi": curve.fppi, "miss_rate": curve.miss_rate}
    _emit(report, args)
    return EXIT_OK


def cmd_nms_sweep(args, cfg: io.RunConfig) -> int:
    records, subset = _load_eval_inputs(args, cfg)
    thresholds = io._floats(args.thresholds) if args.thresholds else cfg.nms_thresholds
    if not thresholds or not all(0 <= t <= 1 for t in thresholds):
        raise CommandError("thresholds must be non-empty values in [0, 1]")
    res = nms_sweep(records, thresholds, cfg.fppi_point, cfg.match_iou)
    rows = [{"nms_threshold": t, "miss_rate_percent": m} for t, m in zip(res.thresholds, res.miss_rates)]
    _emit({"subset": subset.name, "fppi": res.fppi_point, "mean": res.mean,
           "variance": res.variance, "rows": rows}, args)
    return EXIT_OK


def cmd_gradcheck(args, cfg: io.RunConfig) -> int:
    worst = gradient_suite(args.seed, args.batches, cfg.loss_config(), corrupt=args.corrupt_gradient)
    rows = [{"loss": k, "max_rel_error": v, "status": "pass" if v < GRAD_TOLERANCE else "FAIL"}
            for k, v in worst.items()]
    ok = all(r["status"] == "pass" for r in rows)
    _emit({"seed": args.seed, "batches": args.batches, "tolerance": GRAD_TOLERANCE,
           "result": "pass" if ok else "FAIL", "rows": rows}, args)
    return EXIT_OK if ok else EXIT_FAIL


def _scene_images(scenes) -> list[io.AnnotatedImage]:
    return [io.AnnotatedImage(f"scene{i:04d}", s.width, s.height, s.objects) for i, s in enumerate(scenes)]


def cmd_synth(args, cfg: io.RunConfig) -> int:
    if not args.out:
        raise CommandError("synth needs --out DIR")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"{out}: cannot create output directory: {exc.strerror or exc}") from exc
    scenes = generate_scenes(SceneConfig(seed=args.seed), args.count)
    images = _scene_images(scenes)
    written = [out / "annotations.json"]
    try:
        io.write_annotations(written[0], images)
        if args.detections != "none":
            fcfg = cfg.fig2b_config(args.seed)
            train = generate_scenes(SceneConfig(seed=args.seed + 1_000_003), cfg.train_scenes)
            model = train_toy_regressor(train, args.detections, fcfg.train, fcfg.anchors,
                                        fcfg.perception, fcfg.loss)
            rows = []
            for im, scene in zip(images, scenes):
                arr = detections(model, scene_features(scene, fcfg.anchors, fcfg.perception))
                rows.extend(io.Detection(im.id, Box(*b), float(s)) for b, s in zip(arr.boxes, arr.scores))
            written.append(out / "detections.csv")
            io.write_detections(written[-1], rows)
    except OSError as exc:
        raise CommandError(f"{out}: cannot write output: {exc.strerror or exc}") from exc
    sys.stdout.write(render({"seed": args.seed, "images": len(images),
                             "objects": sum(len(im.objects) for im in images),
                             "files": [str(p) for p in written]}, args.format))
    return EXIT_OK


def cmd_fig2b(args, cfg: io.RunConfig) -> int:
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    need = 1 if args.seed is not None else cfg.min_passing_seeds
    runs = [run_fig2b_experiment(cfg.fig2b_config(s), cfg.nms_thresholds) for s in seeds]
    passing = sum(r.variance_ratio < 1 for r in runs)
    rows = [{"seed": r.seed, "var_baseline": r.baseline.variance, "var_aggloss": r.aggloss.variance,
             "variance_ratio": r.variance_ratio, "spread_baseline": r.spread["baseline"],
             "spread_aggloss": r.spread["aggloss"]} for r in runs]
    report = {"seeds_with_ratio_below_1": f"{passing}/{len(runs)}", "required": need,
              "result": "pass" if passing >= need else "FAIL",
              "paper_reference_variance": dict(PAPER_VARIANCES)}
    if args.format == "table":
        report["rows"] = rows
    else:
        report["runs"] = [r.as_dict() for r in runs]
    _emit(report, args)
    return EXIT_OK if passing >= need else EXIT_FAIL


def _proposal(text: str) -> Box:
    try:
        x, y, w, h = (float(v) for v in text.split(","))
        return Box.from_xywh(x, y, w, h)
    except ValueError as exc:
        raise CommandError(f"--proposal expects x,y,w,h: {exc}") from exc


def cmd_poroi_demo(args, cfg: io.RunConfig) -> int:
    f = io.read_feature_map(args.features, cfg.spatial_scale)
    proposal = _proposal(args.proposal)
    params = None
    fixed = None
    if args.fix_scores_one:
        fixed = [1.0] * 5
    else:
        params = OcclusionUnitParams.init(f.shape[0], cfg.pool_h, cfg.pool_w, cfg.occ_widths, args.seed)
    try:
        res = poroi_forward(f, proposal, cfg.part_layout(), params, cfg.pool_h, cfg.pool_w, fixed)
    except RoIError as exc:
        raise CommandError(f"{args.features}: {exc}") from exc
    digest = hashlib.sha256(np.ascontiguousarray(res.combined, dtype="<f8").tobytes()).hexdigest()
    _emit({"proposal_xywh": proposal.to_xywh(), "scores": list(res.scores),
           "combined_shape": list(res.combined.shape), "combined_sum": float(res.combined.sum()),
           "combined_sha256": digest}, args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration ([defaults], [benchmark])")
    common.add_argument("--format", choices=("json", "json-like", "table"), default="json")
    common.add_argument("--out", help="write the report (or, for synth, the files) here")

    parser = argparse.ArgumentParser(prog="occdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("eval", "log-average miss rate of a detection file"),
                           ("nms-sweep", "miss rate at fixed FPPI across NMS thresholds")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("annotations")
        p.add_argument("detections")
        p.add_argument("--subset", default="Reasonable")
        if name == "nms-sweep":
            p.add_argument("--thresholds", help="comma separated, default from config")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--corrupt-gradient", choices=LOSS_NAMES, help=argparse.SUPPRESS)

    p = sub.add_parser("synth", parents=[common], help="write seeded synthetic annotations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--detections", choices=("none", "baseline", "aggloss"), default="none",
                   help="also write detections from a toy model trained on separate scenes")

    p = sub.add_parser("fig2b", parents=[common], help="NMS sensitivity benchmark, both objectives")
    p.add_argument("--seed", type=int, help="run one seed instead of the configured seed set")

    p = sub.add_parser("poroi-demo", parents=[common], help="part visibility scores for one proposal")
    p.add_argument("features", help="feature map file")
    p.add_argument("--proposal", required=True, help="x,y,w,h in image coordinates")
    p.add_argument("--seed", type=int, default=0, help="seed of the occlusion unit weights")
    p.add_argument("--fix-scores-one", action="store_true", help="bypass the unit, every score 1")
    return parser


COMMANDS = {"eval": cmd_eval, "nms-sweep": cmd_nms_sweep, "gradcheck": cmd_gradcheck,
            "synth": cmd_synth, "fig2b": cmd_fig2b, "poroi-demo": cmd_poroi_demo}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.format == "json-like":
        args.format = "json"
    try:
        cfg = io.load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (io.FormatError, CommandError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
