"""``luskit`` command line: eval, anchors, diagnose, stats, synth.

Exit codes: 0 success, 2 unreadable or malformed input, 3 failed validation
or evaluation precondition. ``--format json`` output is stable; ``text`` is
for people.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .anchors import AnchorConfig, anchors_per_position, generate_anchors, potential_anchor_count, preset
from .annotations import (
    AnnotationError,
    ConditionClass,
    Dataset,
    VideoMeta,
    dataset_stats,
    dump_manifest,
    load_manifest,
    parse_ground_truth,
    parse_predictions,
    serialize_ground_truth,
    serialize_predictions,
)
from .diagnosis import (
    CalibrationConfig,
    ScanFeatureSummary,
    aggregate_scan,
    load_rules,
    rank_conditions,
    recalibrate_pleura,
)
from .evaluation import (
    DEFAULT_IOUS,
    EvalMode,
    EvaluationError,
    aggregate_per_class_table,
    evaluate,
    read_per_class_table,
)
from .geometry import FeatureClass
from .synthetic import PerturbationConfig, ScenarioProfile, generate_ground_truth, perturb

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVALID = 3


class InputError(Exception):
    """Unreadable or malformed input (exit 2)."""


class ValidationError(Exception):
    """Arguments or data fail a documented precondition (exit 3)."""


@dataclass
class GlobalConfig:
    gt: str | None = None
    pred: str | None = None
    manifest: str | None = None
    rules: str | None = None
    ious: tuple[float, ...] = DEFAULT_IOUS
    mode: str = "per-frame"
    score_thresh: float = 0.8
    nms_iou: float = 0.2
    pixels_per_mm: float | None = None
    seed: int = 0
    format: str = "text"
    anchors: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.ious or any(not 0.0 < i <= 1.0 for i in self.ious):
            raise ValidationError(f"--iou values must lie in (0, 1], got {list(self.ious)}")
        try:
            EvalMode.parse(self.mode)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        if not 0.0 <= self.score_thresh <= 1.0:
            raise ValidationError(f"--score-thresh must lie in [0, 1], got {self.score_thresh}")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValidationError(f"--nms must lie in [0, 1], got {self.nms_iou}")
        if self.pixels_per_mm is not None and not self.pixels_per_mm > 0:
            raise ValidationError(f"--pixels-per-mm must be positive, got {self.pixels_per_mm}")
        if self.format not in ("json", "csv", "text"):
            raise ValidationError(f"--format must be json, csv or text, got {self.format!r}")


_CONFIG_KEYS = {
    "gt", "pred", "manifest", "rules", "iou", "mode", "score_thresh", "nms_iou",
    "pixels_per_mm", "seed", "format", "anchors",
}


def resolve_config(args: argparse.Namespace) -> GlobalConfig:
    """Merge built-in defaults, the ``--config`` JSON file and explicit flags (in that order)."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        file_cfg = _load_json(args.config)
        if not isinstance(file_cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = set(file_cfg) - _CONFIG_KEYS
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    cfg = GlobalConfig()
    for key in ("gt", "pred", "manifest", "rules", "mode", "score_thresh", "nms_iou", "pixels_per_mm", "seed", "format"):
        if key in file_cfg:
            setattr(cfg, key, file_cfg[key])
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    try:
        if "iou" in file_cfg:
            cfg.ious = tuple(float(v) for v in file_cfg["iou"])
        if getattr(args, "iou", None) is not None:
            cfg.ious = args.iou
        cfg.anchors = dict(file_cfg.get("anchors", {}))
        for key in ("score_thresh", "nms_iou"):
            setattr(cfg, key, float(getattr(cfg, key)))
        if cfg.pixels_per_mm is not None:
            cfg.pixels_per_mm = float(cfg.pixels_per_mm)
        if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int):
            raise ValidationError(f"seed must be an integer, got {cfg.seed!r}")
        for key in ("gt", "pred", "manifest", "rules"):
            if getattr(cfg, key) is not None and not isinstance(getattr(cfg, key), str):
                raise ValidationError(f"{key} must be a path string")
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid config value: {exc}") from None
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# io helpers

def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except UnicodeDecodeError:
        raise InputError(f"{path} is not valid UTF-8") from None


def _load_json(path: str) -> dict:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from None


def _manifest(path: str | None):
    if path is None:
        return None
    try:
        return load_manifest(_load_json(path))
    except AnnotationError as exc:
        raise InputError(f"{path}: {exc}") from None


def _read_dataset(path: str, predictions: bool, manifest=None) -> Dataset:
    parse = parse_predictions if predictions else parse_ground_truth
    try:
        return parse(_read_text(path), manifest, source=path)
    except AnnotationError as exc:
        raise InputError(str(exc)) from None


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH or WxHxD, got {text!r}") from None
    if len(dims) not in (2, 3):
        raise argparse.ArgumentTypeError(f"expected WxH or WxHxD, got {text!r}")
    return dims


# ---------------------------------------------------------------------------
# commands

def cmd_eval(args: argparse.Namespace) -> tuple[int, str]:
    cfg = resolve_config(args)
    if args.per_class:
        try:
            table = read_per_class_table(args.per_class)
        except OSError as exc:
            raise InputError(f"cannot read {args.per_class}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise InputError(f"{args.per_class}: {exc}") from None
        try:
            totals = aggregate_per_class_table(table)
        except EvaluationError as exc:
            raise ValidationError(str(exc)) from None
        return EXIT_OK, _render_table(table, totals, cfg.format)

    if not cfg.gt or not cfg.pred:
        raise ValidationError("eval needs --gt and --pred (or --per-class)")
    manifest = _manifest(cfg.manifest)
    gt = _read_dataset(cfg.gt, False, manifest)
    preds = _read_dataset(cfg.pred, True, manifest)
    try:
        report = evaluate(gt, preds, cfg.ious, cfg.mode, cfg.score_thresh, cfg.nms_iou)
    except EvaluationError as exc:
        raise ValidationError(str(exc)) from None
    if cfg.format == "json":
        return EXIT_OK, report.to_json() + "\n"
    if cfg.format == "csv":
        return EXIT_OK, report.to_csv()
    return EXIT_OK, report.to_text()


def _render_table(table, totals, fmt: str) -> str:
    labels = list(table)
    if fmt == "json":
        doc = {
            "per_class": {c.value: {lab: table[lab][c] for lab in labels} for c in FeatureClass},
            "mean_ap": totals,
        }
        return json.dumps(doc, indent=2) + "\n"
    rows = [["class"] + labels]
    rows += [[c.display_name] + [f"{table[lab][c]:g}" for lab in labels] for c in FeatureClass]
    rows.append(["Total mAP"] + [f"{totals[lab]:.2f}" for lab in labels])
    if fmt == "csv":
        return "".join(",".join(r) + "\n" for r in rows)
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    return "".join(
        "  ".join(v.ljust(w) if k == 0 else v.rjust(w) for k, (v, w) in enumerate(zip(r, widths))) + "\n"
        for r in rows
    )


def _anchor_config(args: argparse.Namespace, cfg: GlobalConfig) -> AnchorConfig:
    data = dict(cfg.anchors)
    if args.preset:
        data["preset"] = args.preset
    if args.scales is not None:
        data["scales"] = list(args.scales)
    if args.ratios is not None:
        data["ratios"] = list(args.ratios)
    if args.feature_map is not None:
        data["feature_map"] = list(args.feature_map)
    if args.stride is not None:
        data["stride"] = args.stride
    if "preset" not in data and not {"scales", "ratios"} <= set(data):
        data["preset"] = "paper-frcnn"
    try:
        return AnchorConfig.from_dict(data)
    except KeyError as exc:
        raise ValidationError(str(exc).strip("'\"")) from None
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def cmd_anchors(args: argparse.Namespace) -> tuple[int, str]:
    cfg = resolve_config(args)
    conf = _anchor_config(args, cfg)
    k = anchors_per_position(conf)
    total = potential_anchor_count(conf)
    if args.grid_csv:
        if args.image_size is None:
            w = conf.feature_map_width * conf.stride
            h = conf.feature_map_height * conf.stride
        else:
            w, h = args.image_size[:2]
        grid = generate_anchors(conf, w, h)
        lines = ["depth,cell_x,cell_y,scale,ratio,xmin,ymin,xmax,ymax"]
        for o, b in zip(grid.origins, grid.boxes):
            r = conf.ratios[o[4]]
            lines.append(
                f"{o[0]},{o[1]},{o[2]},{conf.scales[o[3]]:g},{r.numerator}/{r.denominator},"
                + ",".join(f"{v:.6g}" for v in b)
            )
        _write_atomic(Path(args.grid_csv), "\n".join(lines) + "\n")
    if cfg.format == "json":
        doc = {"anchors_per_position": k, "potential_anchors": total, "config": conf.to_dict()}
        return EXIT_OK, json.dumps(doc, indent=2) + "\n"
    if cfg.format == "csv":
        return EXIT_OK, f"anchors_per_position,potential_anchors\n{k},{total}\n"
    return EXIT_OK, f"k={k}, total={total}\n"


def cmd_diagnose(args: argparse.Namespace) -> tuple[int, str]:
    cfg = resolve_config(args)
    if not cfg.pred:
        raise ValidationError("diagnose needs --pred")
    manifest = _manifest(cfg.manifest)
    preds = _read_dataset(cfg.pred, True, manifest)
    try:
        rules = load_rules(cfg.rules) if cfg.rules else load_rules()
    except OSError as exc:
        raise InputError(f"cannot read rules: {exc}") from None
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise InputError(f"invalid rule file: {exc}") from None
    calib = CalibrationConfig(cfg.pixels_per_mm) if cfg.pixels_per_mm else None
    if not (0.0 <= args.min_score <= 1.0) or args.min_fraction <= 0 or args.min_frames < 1:
        raise ValidationError("presence thresholds out of range")

    videos = dict(manifest or {})
    for vid in preds.videos:
        videos.setdefault(vid, preds.videos[vid])
    if not videos:
        videos = {"scan": VideoMeta()}

    scans = []
    for vid, meta in sorted(videos.items()):
        frames = [
            (f.frame_index, recalibrate_pleura(f.detections(), calib) if calib else f.detections())
            for f in preds.frames if f.video_id == vid
        ]
        n_frames = max(args.n_frames or 0, len(frames))
        if n_frames == 0:
            summary = ScanFeatureSummary()
        else:
            summary = aggregate_scan(frames, args.min_score, args.min_fraction, args.min_frames, n_frames)
        age = args.age if args.age is not None else meta.age_hours
        candidates = rank_conditions(summary, age, rules)
        scans.append({"video_id": vid, "age_hours": age, "summary": summary, "candidates": candidates})

    if cfg.format == "json":
        doc = {
            "scans": [
                {
                    "video_id": s["video_id"],
                    "age_hours": s["age_hours"],
                    "present_features": sorted(c.value for c in s["summary"].present_features),
                    "candidates": [c.to_dict() for c in s["candidates"]],
                }
                for s in scans
            ]
        }
        return EXIT_OK, json.dumps(doc, indent=2) + "\n"
    if cfg.format == "csv":
        lines = ["video_id,rank,condition,match_score,age_compatible,conflicting"]
        for s in scans:
            for rank, c in enumerate(s["candidates"], 1):
                lines.append(f"{s['video_id']},{rank},{c.condition.value},{c.match_score:.4f},"
                             f"{str(c.age_compatible).lower()},{'|'.join(f.value for f in c.conflicting)}")
        return EXIT_OK, "\n".join(lines) + "\n"
    out = []
    for s in scans:
        age = "unknown" if s["age_hours"] is None else f"{s['age_hours']:g} h"
        present = ", ".join(sorted(c.value for c in s["summary"].present_features)) or "none"
        out.append(f"scan {s['video_id']} (age {age}); features present: {present}")
        out.append("candidate conditions for clinician review, best supported first:")
        for rank, c in enumerate(s["candidates"], 1):
            flag = "" if c.age_compatible else "  [age-incompatible]"
            out.append(f"  {rank}. {c.condition.value:<6} match {c.match_score:.2f}{flag}")
            out.append(f"     {c.rationale}")
    return EXIT_OK, "\n".join(out) + "\n"


def cmd_stats(args: argparse.Namespace) -> tuple[int, str]:
    cfg = resolve_config(args)
    path = args.path or cfg.gt
    if not path:
        raise ValidationError("stats needs a file path")
    d = _read_dataset(path, args.predictions, _manifest(cfg.manifest))
    stats = dataset_stats(d)
    if cfg.format == "json":
        return EXIT_OK, json.dumps(stats.to_dict(), indent=2) + "\n"
    rows = [f"{c.value},{n}" for c, n in stats.class_counts.items()]
    if cfg.format == "csv":
        return EXIT_OK, "class,count\n" + "\n".join(rows) + "\n"
    width = max(len(c.value) for c in FeatureClass)
    lines = [f"{c.value:<{width}}  {n}" for c, n in stats.class_counts.items()]
    lines.append(f"{'total':<{width}}  {stats.total_boxes}")
    lines.append(f"frames: {len(d)} in {len(stats.frames_per_video)} video(s)")
    return EXIT_OK, "\n".join(lines) + "\n"


def cmd_synth(args: argparse.Namespace) -> tuple[int, str]:
    cfg = resolve_config(args)
    try:
        profile = ScenarioProfile(
            ConditionClass.parse(args.profile), args.frames, video_id=args.video_id, age_hours=args.age
        )
        pcfg = PerturbationConfig(
            jitter_sigma=args.jitter, drop_rate=args.drop_rate, spurious_rate=args.spurious_rate,
            score_mean_tp=args.score_mean_tp, score_mean_fp=args.score_mean_fp, seed=cfg.seed,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    emitted: Counter = Counter()
    perturbed: Counter = Counter()
    gt = generate_ground_truth(profile, cfg.seed, ledger=emitted)
    preds = perturb(gt, pcfg, (profile.image_width, profile.image_height), ledger=perturbed)

    out_dir = Path(args.out_dir)
    files = {"gt": out_dir / "gt.csv", "pred": out_dir / "pred.csv", "manifest": out_dir / "manifest.json"}
    _write_atomic(files["gt"], serialize_ground_truth(gt))
    _write_atomic(files["pred"], serialize_predictions(preds))
    _write_atomic(files["manifest"], dump_manifest(gt))
    doc = {
        "profile": profile.condition.value,
        "frames": profile.frames,
        "seed": cfg.seed,
        "files": {k: str(v) for k, v in files.items()},
        "emitted": {c.value: emitted.get(c, 0) for c in FeatureClass},
        "perturbation": {k: perturbed.get(k, 0) for k in ("kept", "dropped", "spurious")},
    }
    if cfg.format == "json":
        return EXIT_OK, json.dumps(doc, indent=2) + "\n"
    if cfg.format == "csv":
        return EXIT_OK, "class,emitted\n" + "".join(f"{k},{v}\n" for k, v in doc["emitted"].items())
    return EXIT_OK, (
        f"wrote {files['gt']}, {files['pred']}, {files['manifest']}\n"
        f"emitted: {sum(emitted.values())} boxes; kept {doc['perturbation']['kept']}, "
        f"dropped {doc['perturbation']['dropped']}, spurious {doc['perturbation']['spurious']}\n"
    )


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; explicit flags override it")
    common.add_argument("--format", choices=("json", "csv", "text"), default=None)

    parser = argparse.ArgumentParser(prog="luskit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", parents=[common], help="AP/mAP of predictions against ground truth")
    p.add_argument("--gt")
    p.add_argument("--pred")
    p.add_argument("--manifest")
    p.add_argument("--iou", type=_float_list, help="comma-separated IoU thresholds (default 0.4,0.45,0.5)")
    p.add_argument("--mode", choices=("per-frame", "dataset"))
    p.add_argument("--score-thresh", dest="score_thresh", type=float, help="default 0.8")
    p.add_argument("--nms", dest="nms_iou", type=float, help="per-class NMS IoU (default 0.2; 0.1 for RetinaNet)")
    p.add_argument("--per-class", help="aggregate a per-class AP table (CSV path or builtin:table3-frcnn)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("anchors", parents=[common], help="anchor counts and optional grid dump")
    p.add_argument("--preset", help="paper-frcnn or paper-retinanet")
    p.add_argument("--scales", type=_float_list)
    p.add_argument("--ratios", type=lambda s: tuple(v.strip() for v in s.split(",") if v.strip()),
                   help="comma-separated height:width ratios, e.g. 1,31/119")
    p.add_argument("--feature-map", dest="feature_map", type=_dims, help="WxHxD")
    p.add_argument("--stride", type=float)
    p.add_argument("--image-size", dest="image_size", type=_dims, help="WxH for --grid-csv")
    p.add_argument("--grid-csv", dest="grid_csv", help="write every anchor to this CSV")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("diagnose", parents=[common], help="rank candidate conditions per scan")
    p.add_argument("--pred")
    p.add_argument("--manifest")
    p.add_argument("--rules", help="rule file (default: $LUSKIT_RULES or built-in)")
    p.add_argument("--age", type=float, help="patient age in hours; overrides the manifest")
    p.add_argument("--pixels-per-mm", dest="pixels_per_mm", type=float,
                   help="relabel normal/thick pleura by measured thickness")
    p.add_argument("--min-score", dest="min_score", type=float, default=0.8)
    p.add_argument("--min-fraction", dest="min_fraction", type=float, default=0.1)
    p.add_argument("--min-frames", dest="min_frames", type=int, default=1)
    p.add_argument("--n-frames", dest="n_frames", type=int, help="scan length when frames lack detections")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("stats", parents=[common], help="per-class box counts")
    p.add_argument("path", nargs="?")
    p.add_argument("--predictions", action="store_true", help="input is a prediction file")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic scenario")
    p.add_argument("--profile", required=True, choices=[c.value for c in ConditionClass])
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir", default=".")
    p.add_argument("--video-id", dest="video_id")
    p.add_argument("--age", type=float, help="age in hours recorded in the manifest")
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--drop-rate", dest="drop_rate", type=float, default=0.0)
    p.add_argument("--spurious-rate", dest="spurious_rate", type=float, default=0.0)
    p.add_argument("--score-mean-tp", dest="score_mean_tp", type=float, default=1.0)
    p.add_argument("--score-mean-fp", dest="score_mean_fp", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        code, text = args.func(args)
    except InputError as exc:
        print(f"luskit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValidationError as exc:
        print(f"luskit: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
