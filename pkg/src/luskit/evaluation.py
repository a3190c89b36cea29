"""Detection-to-ground-truth matching, precision/recall, AP and mAP.

Two aggregation protocols are offered:

* ``per-frame``: AP is computed separately inside every frame that holds
  ground truth of a class and averaged over those frames (frames with
  predictions but no ground truth of the class score 0, frames with neither
  are skipped);
* ``dataset``: the usual pooled protocol, one PR curve per class over all
  frames.

AP is the all-point interpolated area under the PR curve. Curve points are
taken at every distinct score, so detections with tied scores enter
together.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotations import Dataset
from .geometry import BoundingBox, Detection, FeatureClass, boxes_to_array, iou_matrix, nms

__all__ = [
    "EvaluationError",
    "ClassAbsentError",
    "EvalMode",
    "ClassMatch",
    "MatchOutcome",
    "PRCurve",
    "APReport",
    "match_frame",
    "precision_recall",
    "pr_curve",
    "average_precision",
    "class_ap_per_frame_averaged",
    "class_ap_dataset_level",
    "mean_average_precision",
    "evaluate",
    "DEFAULT_IOUS",
    "read_per_class_table",
    "aggregate_per_class_table",
]

DEFAULT_IOUS = (0.4, 0.45, 0.5)


class EvaluationError(ValueError):
    pass


class ClassAbsentError(EvaluationError):
    pass


class EvalMode(str, Enum):
    PerFrameAveraged = "per-frame"
    DatasetLevel = "dataset"

    @classmethod
    def parse(cls, value: "str | EvalMode") -> "EvalMode":
        if isinstance(value, EvalMode):
            return value
        aliases = {"per-frame": cls.PerFrameAveraged, "perframeaveraged": cls.PerFrameAveraged,
                   "dataset": cls.DatasetLevel, "datasetlevel": cls.DatasetLevel}
        try:
            return aliases[value.lower()]
        except KeyError:
            raise ValueError(f"unknown evaluation mode {value!r}") from None


@dataclass(frozen=True)
class ClassMatch:
    """Matching result for one class in one frame.

    ``scores`` and ``is_tp`` follow the ranking order (descending score, ties
    by input order); ``pairs`` hold ``(prediction_index, gt_index, iou)`` with
    indices into the lists given to :func:`match_frame`.
    """

    n_gt: int
    scores: tuple[float, ...] = ()
    is_tp: tuple[bool, ...] = ()
    pairs: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self) -> None:
        if len({p for p, _, _ in self.pairs}) != len(self.pairs) or len({g for _, g, _ in self.pairs}) != len(self.pairs):
            raise AssertionError("matching is not one-to-one")
        if self.tp + self.fn != self.n_gt:
            raise AssertionError("tp + fn must equal the number of ground-truth boxes")

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.scores) - len(self.pairs)

    @property
    def fn(self) -> int:
        return self.n_gt - len(self.pairs)


@dataclass(frozen=True)
class MatchOutcome:
    per_class: dict[FeatureClass, ClassMatch] = field(default_factory=dict)

    def __getitem__(self, cls: FeatureClass) -> ClassMatch:
        return self.per_class.get(cls, ClassMatch(0))

    @property
    def tp(self) -> int:
        return sum(m.tp for m in self.per_class.values())

    @property
    def fp(self) -> int:
        return sum(m.fp for m in self.per_class.values())

    @property
    def fn(self) -> int:
        return sum(m.fn for m in self.per_class.values())


def _match_class(
    pred_idx: list[int], preds: Sequence[Detection], gt_idx: list[int], gt_boxes: np.ndarray, iou_thresh: float
) -> ClassMatch:
    order = sorted(pred_idx, key=lambda i: -preds[i].score)
    if order and len(gt_idx):
        overlaps = iou_matrix(boxes_to_array(preds[i].box for i in order), gt_boxes)
    taken = np.zeros(len(gt_idx), dtype=bool)
    is_tp, pairs = [], []
    for rank, p in enumerate(order):
        hit = False
        if len(gt_idx) and not taken.all():
            row = np.where(taken, -1.0, overlaps[rank])
            j = int(np.argmax(row))  # first maximum -> lowest gt index
            if row[j] >= iou_thresh:
                taken[j] = True
                pairs.append((p, gt_idx[j], float(row[j])))
                hit = True
        is_tp.append(hit)
    return ClassMatch(
        n_gt=len(gt_idx),
        scores=tuple(preds[i].score for i in order),
        is_tp=tuple(is_tp),
        pairs=tuple(pairs),
    )


def match_frame(
    preds: Sequence[Detection],
    gts: Sequence[tuple[BoundingBox, FeatureClass]],
    iou_thresh: float,
) -> MatchOutcome:
    """Greedy one-to-one matching of one frame's predictions to its ground truth.

    Per class, predictions are visited by descending score and take the
    still-unmatched ground-truth box of highest IoU if that IoU is at least
    ``iou_thresh``.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    classes = {d.cls for d in preds} | {c for _, c in gts}
    out = {}
    for cls in sorted(classes, key=lambda c: c.value):
        p_idx = [i for i, d in enumerate(preds) if d.cls is cls]
        g_idx = [j for j, (_, c) in enumerate(gts) if c is cls]
        g_boxes = boxes_to_array(gts[j][0] for j in g_idx)
        out[cls] = _match_class(p_idx, preds, g_idx, g_boxes, iou_thresh)
    return MatchOutcome(out)


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    """Precision and recall; precision is 1 with no predictions, recall 0 with no ground truth."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


@dataclass(frozen=True)
class PRCurve:
    """Precision/recall points, one per distinct score threshold, loosest last."""

    recall: tuple[float, ...] = ()
    precision: tuple[float, ...] = ()
    thresholds: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not len(self.recall) == len(self.precision) == len(self.thresholds):
            raise ValueError("recall, precision and thresholds must have equal length")
        if any(b < a for a, b in zip(self.recall, self.recall[1:])):
            raise ValueError("recall must be non-decreasing along the sweep")
        if any(not 0.0 <= v <= 1.0 for v in self.recall + self.precision):
            raise ValueError("recall and precision must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.recall)


def pr_curve(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> PRCurve:
    """Sweep the score threshold over ranked detections.

    ``scores``/``is_tp`` must be ranked by descending score, as produced by
    :func:`match_frame`.
    """
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.asarray(is_tp, dtype=bool)
    if len(scores) == 0:
        return PRCurve()
    if np.any(np.diff(scores) > 0):
        raise ValueError("scores must be sorted in descending order")
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    # last rank of each run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    recall = tp[ends] / n_gt if n_gt else np.zeros(len(ends))
    precision = tp[ends] / (tp[ends] + fp[ends])
    return PRCurve(tuple(recall.tolist()), tuple(precision.tolist()), tuple(scores[ends].tolist()))


def average_precision(curve: PRCurve) -> float:
    """All-point interpolated area under ``curve``."""
    if len(curve) == 0:
        return 0.0
    rec = np.concatenate(([0.0], curve.recall))
    prec = np.concatenate(([0.0], curve.precision))
    # precision envelope: max precision at any recall >= r
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    return float(np.sum(np.diff(rec) * prec[1:]))


Frame = tuple[Sequence[Detection], Sequence[tuple[BoundingBox, FeatureClass]]]


def _frame_class_ap(preds, gts, cls: FeatureClass, iou: float) -> float | None:
    """AP of one class inside one frame; None when the frame has neither."""
    p = [d for d in preds if d.cls is cls]
    g = [(b, c) for b, c in gts if c is cls]
    if not g:
        return None if not p else 0.0
    m = match_frame(p, g, iou)[cls]
    return average_precision(pr_curve(m.scores, m.is_tp, m.n_gt))


def class_ap_per_frame_averaged(cls: FeatureClass, frames: Iterable[Frame], iou: float) -> float:
    """Mean of per-frame APs over frames holding ground truth or predictions of ``cls``."""
    values, any_gt = [], False
    for preds, gts in frames:
        any_gt = any_gt or any(c is cls for _, c in gts)
        ap = _frame_class_ap(preds, gts, cls, iou)
        if ap is not None:
            values.append(ap)
    if not any_gt:
        raise ClassAbsentError(f"class {cls.value} is absent from the ground truth")
    return float(math.fsum(values) / len(values))


def class_ap_dataset_level(cls: FeatureClass, frames: Iterable[Frame], iou: float) -> float:
    """AP of one pooled PR curve over all frames."""
    scores: list[float] = []
    hits: list[bool] = []
    n_gt = 0
    for preds, gts in frames:
        p = [d for d in preds if d.cls is cls]
        g = [(b, c) for b, c in gts if c is cls]
        m = match_frame(p, g, iou)[cls]
        n_gt += m.n_gt
        scores.extend(m.scores)
        hits.extend(m.is_tp)
    if n_gt == 0:
        raise ClassAbsentError(f"class {cls.value} is absent from the ground truth")
    # stable: frames earlier in the dataset win score ties
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    return average_precision(pr_curve([scores[i] for i in order], [hits[i] for i in order], n_gt))


def mean_average_precision(per_class: Mapping[FeatureClass, float]) -> float:
    """Arithmetic mean over all seven feature classes."""
    missing = [c.value for c in FeatureClass if c not in per_class or per_class[c] is None]
    if missing:
        raise EvaluationError(f"missing per-class values for {missing}")
    return float(math.fsum(per_class[c] for c in FeatureClass) / len(FeatureClass))


def _iou_key(iou: float) -> str:
    return format(iou, "g")


@dataclass(frozen=True)
class APReport:
    """Per-class AP at each IoU threshold plus the overall mean.

    ``ap[iou][cls]`` is ``None`` for classes absent from the ground truth;
    ``mean_ap[iou]`` averages the classes that are present, which is the
    mean over all seven whenever every class occurs.
    """

    ious: tuple[float, ...]
    ap: dict[float, dict[FeatureClass, float | None]]
    mean_ap: dict[float, float]
    mode: EvalMode = EvalMode.PerFrameAveraged

    @classmethod
    def from_per_class(
        cls,
        table: Mapping[float, Mapping[FeatureClass, float]],
        mode: EvalMode = EvalMode.PerFrameAveraged,
        require_all: bool = True,
    ) -> "APReport":
        """Build a report from per-class values, computing the overall means."""
        ious = tuple(table)
        ap = {iou: {c: table[iou].get(c) for c in FeatureClass} for iou in ious}
        if require_all:
            mean_ap = {iou: mean_average_precision(ap[iou]) for iou in ious}
        else:
            mean_ap = {}
            for iou in ious:
                present = [v for v in ap[iou].values() if v is not None]
                if not present:
                    raise EvaluationError("no class has ground truth")
                mean_ap[iou] = float(math.fsum(present) / len(present))
        return cls(ious, ap, mean_ap, EvalMode.parse(mode))

    @property
    def classes_present(self) -> list[FeatureClass]:
        first = self.ap[self.ious[0]]
        return [c for c in FeatureClass if first.get(c) is not None]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "ious": list(self.ious),
            "per_class": {
                c.value: {_iou_key(i): self.ap[i][c] for i in self.ious} for c in FeatureClass
            },
            "mean_ap": {_iou_key(i): self.mean_ap[i] for i in self.ious},
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, data: Mapping) -> "APReport":
        ious = tuple(float(i) for i in data["ious"])
        ap = {
            i: {FeatureClass.parse(c): vals.get(_iou_key(i)) for c, vals in data["per_class"].items()}
            for i in ious
        }
        mean_ap = {i: float(data["mean_ap"][_iou_key(i)]) for i in ious}
        return cls(ious, ap, mean_ap, EvalMode.parse(data.get("mode", "per-frame")))

    def rows(self, percent: bool = True) -> list[list[str]]:
        """Table layout: classes then ``Total mAP``, one column per IoU threshold."""
        scale = 100.0 if percent else 1.0

        def cell(v):
            return "-" if v is None else f"{v * scale:.2f}"

        header = ["class"] + [f"IoU={_iou_key(i)}" for i in self.ious]
        body = [[c.display_name] + [cell(self.ap[i][c]) for i in self.ious] for c in FeatureClass]
        total = ["Total mAP"] + [cell(self.mean_ap[i]) for i in self.ious]
        return [header] + body + [total]

    def to_csv(self, percent: bool = True) -> str:
        out = io.StringIO()
        csv.writer(out, lineterminator="\n").writerows(self.rows(percent))
        return out.getvalue()

    def to_text(self) -> str:
        rows = self.rows(percent=True)
        widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
        lines = [f"mode: {self.mode.value}"]
        for n, r in enumerate(rows):
            lines.append("  ".join(v.ljust(w) if k == 0 else v.rjust(w) for k, (v, w) in enumerate(zip(r, widths))))
            if n == 0 or n == len(rows) - 2:
                lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
        return "\n".join(lines) + "\n"


def evaluate(
    gt: Dataset,
    preds: Dataset,
    ious: Sequence[float] = DEFAULT_IOUS,
    mode: EvalMode | str = EvalMode.PerFrameAveraged,
    score_thresh: float = 0.8,
    nms_iou: float = 0.2,
) -> APReport:
    """Score ``preds`` against ``gt`` at each IoU threshold.

    Predictions are first filtered by ``score_thresh`` and per-class NMS at
    ``nms_iou``. Classes absent from the ground truth are reported as ``None``
    and left out of the overall mean.
    """
    mode = EvalMode.parse(mode)
    ious = tuple(float(i) for i in ious)
    if not ious:
        raise EvaluationError("at least one IoU threshold is required")
    if any(not 0.0 < i <= 1.0 for i in ious):
        raise EvaluationError(f"IoU thresholds must lie in (0, 1], got {ious}")
    if gt.n_boxes == 0:
        raise EvaluationError("ground truth is empty")
    gt_frames = gt.by_key()
    unknown = [k for k in preds.keys() if k not in gt_frames]
    if unknown:
        raise EvaluationError(f"predictions reference frames missing from the ground truth: {unknown[:5]}")

    pred_frames = preds.by_key()
    frames: list[Frame] = []
    for key, f in gt_frames.items():
        p = pred_frames.get(key)
        dets = nms(p.detections(), score_thresh, nms_iou) if p is not None else []
        frames.append((dets, f.ground_truth()))

    present = {c for _, g in frames for _, c in g}
    ap_fn = class_ap_per_frame_averaged if mode is EvalMode.PerFrameAveraged else class_ap_dataset_level
    table = {
        iou: {c: (ap_fn(c, frames, iou) if c in present else None) for c in FeatureClass}
        for iou in ious
    }
    return APReport.from_per_class(table, mode, require_all=False)


def read_per_class_table(source) -> dict[str, dict[FeatureClass, float]]:
    """Read a per-class value table: ``class,<label>,...`` header then one row per class.

    ``source`` is CSV text, a path, or ``builtin:<name>`` for a table shipped in
    ``luskit/data`` (``builtin:table3-frcnn``, ``builtin:table3-retinanet``).
    Lines starting with ``#`` are ignored. Returns ``{label: {class: value}}``.
    """
    if isinstance(source, str) and source.startswith("builtin:"):
        from importlib import resources

        name = source.split(":", 1)[1].replace("-", "_")
        text = resources.files("luskit").joinpath(f"data/{name}.csv").read_text(encoding="utf-8")
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    try:
        rows = list(csv.reader(l for l in text.splitlines() if l.strip() and not l.lstrip().startswith("#")))
    except csv.Error as exc:
        raise ValueError(f"malformed CSV: {exc}") from None
    if not rows or rows[0][0].strip() != "class":
        raise ValueError("per-class table must start with a 'class,...' header")
    labels = [h.strip() for h in rows[0][1:]]
    table: dict[str, dict[FeatureClass, float]] = {lab: {} for lab in labels}
    seen: set[FeatureClass] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(labels) + 1:
            raise ValueError(f"row {lineno}: expected {len(labels) + 1} fields, got {len(row)}")
        cls = FeatureClass.parse(row[0].strip())
        if cls in seen:
            raise ValueError(f"row {lineno}: duplicate class {cls.value}")
        seen.add(cls)
        for lab, value in zip(labels, row[1:]):
            v = float(value)
            if not math.isfinite(v):
                raise ValueError(f"row {lineno}: value must be finite, got {value!r}")
            table[lab][cls] = v
    return table


def aggregate_per_class_table(table: Mapping[str, Mapping[FeatureClass, float]]) -> dict[str, float]:
    """Overall mean per column; every column needs all seven classes."""
    return {label: mean_average_precision(values) for label, values in table.items()}
