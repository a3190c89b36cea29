"""Ground-truth / prediction CSV formats, video manifests, statistics and splits.

File grammar (UTF-8, one box per line, no quoting)::

    gt line   := video_id "," frame_index "," class "," xmin "," ymin "," xmax "," ymax
    pred line := video_id "," frame_index "," class "," score "," xmin "," ymin "," xmax "," ymax

Blank lines and lines whose first non-blank character is ``#`` are ignored.
``video_id`` is any non-empty token without commas or surrounding whitespace
that does not start with ``#``; ``frame_index`` is a non-negative decimal
integer; ``class`` is one of the exact :class:`~luskit.geometry.FeatureClass`
tokens; numbers are finite decimals. Coordinates must be non-negative with
``xmax > xmin`` and ``ymax > ymin``; scores lie in ``[0, 1]``.

Per-video metadata lives in a JSON manifest::

    {"videos": {"<video_id>": {"condition": "RDS", "age_hours": 6, "frame_rate": 18}}}
"""
from __future__ import annotations

import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from os import PathLike
from pathlib import Path
from typing import Iterable, Iterator, Mapping, TextIO, Union

import numpy as np

from .geometry import BoundingBox, Detection, FeatureClass

__all__ = [
    "AnnotationError",
    "ConditionClass",
    "VideoMeta",
    "FrameAnnotations",
    "Dataset",
    "DatasetStats",
    "REFERENCE_CLASS_COUNTS",
    "REFERENCE_SPLIT",
    "parse_ground_truth",
    "parse_predictions",
    "serialize_ground_truth",
    "serialize_predictions",
    "read_ground_truth",
    "read_predictions",
    "load_manifest",
    "dump_manifest",
    "dataset_stats",
    "split_dataset",
    "split_manifest",
    "split_counts",
    "load_split_counts",
    "check_split_counts",
]

DEFAULT_FRAME_RATE = 18.0

GT_HEADER = "# video_id,frame_index,class,xmin,ymin,xmax,ymax"
PRED_HEADER = "# video_id,frame_index,class,score,xmin,ymin,xmax,ymax"


class AnnotationError(ValueError):
    """Malformed or invalid annotation input; ``lineno`` is 1-based when known."""

    def __init__(self, message: str, lineno: int | None = None, source: str | None = None):
        self.lineno = lineno
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if lineno is not None:
            where += f"line {lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ConditionClass(str, Enum):
    Normal = "Normal"
    RDS = "RDS"
    TTN = "TTN"
    PDA = "PDA"
    CLD = "CLD"

    @classmethod
    def parse(cls, label: str) -> "ConditionClass":
        try:
            return cls(label)
        except ValueError:
            raise ValueError(f"unknown condition {label!r}") from None

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class VideoMeta:
    condition: ConditionClass | None = None
    age_hours: float | None = None
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self) -> None:
        if self.condition is not None and not isinstance(self.condition, ConditionClass):
            object.__setattr__(self, "condition", ConditionClass.parse(self.condition))
        if self.age_hours is not None and not (math.isfinite(self.age_hours) and self.age_hours >= 0):
            raise ValueError(f"age_hours must be a non-negative number, got {self.age_hours}")
        if not (math.isfinite(self.frame_rate) and self.frame_rate > 0):
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")

    def to_dict(self) -> dict:
        out: dict = {}
        if self.condition is not None:
            out["condition"] = self.condition.value
        if self.age_hours is not None:
            out["age_hours"] = self.age_hours
        out["frame_rate"] = self.frame_rate
        return out


GroundTruthBox = tuple[BoundingBox, FeatureClass]
FrameKey = tuple[str, int]


@dataclass(frozen=True)
class FrameAnnotations:
    """All boxes of one frame: ``(BoundingBox, FeatureClass)`` pairs or :class:`Detection` s."""

    video_id: str
    frame_index: int
    boxes: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        vid = self.video_id
        if not vid or vid != vid.strip() or vid.startswith("#") or any(c in vid for c in ",\r\n"):
            raise ValueError(f"invalid video_id {vid!r}")
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be non-negative, got {self.frame_index}")

    @property
    def key(self) -> FrameKey:
        return (self.video_id, self.frame_index)

    @property
    def is_prediction(self) -> bool:
        return bool(self.boxes) and isinstance(self.boxes[0], Detection)

    def ground_truth(self) -> list[GroundTruthBox]:
        return [(b.box, b.cls) if isinstance(b, Detection) else b for b in self.boxes]

    def detections(self) -> list[Detection]:
        return [b if isinstance(b, Detection) else Detection(b[0], b[1], 1.0) for b in self.boxes]


@dataclass(frozen=True)
class Dataset:
    """Frame-indexed boxes plus per-video metadata.

    Frames are kept sorted by ``(video_id, frame_index)``; every frame must
    reference a video declared in ``videos``.
    """

    frames: tuple[FrameAnnotations, ...] = ()
    videos: Mapping[str, VideoMeta] = field(default_factory=dict)

    def __post_init__(self) -> None:
        frames = tuple(sorted(self.frames, key=lambda f: f.key))
        seen: set[FrameKey] = set()
        for f in frames:
            if f.key in seen:
                raise ValueError(f"duplicate frame {f.key}")
            seen.add(f.key)
            if f.video_id not in self.videos:
                raise ValueError(f"frame {f.key} references undeclared video {f.video_id!r}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "videos", dict(sorted(self.videos.items())))

    @classmethod
    def build(cls, frames: Iterable[FrameAnnotations], videos: Mapping[str, VideoMeta] | None = None) -> "Dataset":
        """Like the constructor, but videos missing from ``videos`` get default metadata."""
        frames = tuple(frames)
        decl = dict(videos or {})
        for f in frames:
            decl.setdefault(f.video_id, VideoMeta())
        return cls(frames, decl)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[FrameAnnotations]:
        return iter(self.frames)

    def keys(self) -> list[FrameKey]:
        return [f.key for f in self.frames]

    def by_key(self) -> dict[FrameKey, FrameAnnotations]:
        return {f.key: f for f in self.frames}

    @property
    def n_boxes(self) -> int:
        return sum(len(f.boxes) for f in self.frames)

    @property
    def is_prediction(self) -> bool:
        return any(f.is_prediction for f in self.frames)

    def condition_of(self, video_id: str) -> ConditionClass | None:
        return self.videos[video_id].condition

    def subset(self, keys: Iterable[FrameKey]) -> "Dataset":
        wanted = set(keys)
        frames = [f for f in self.frames if f.key in wanted]
        used = {f.video_id for f in frames}
        return Dataset(frames, {v: m for v, m in self.videos.items() if v in used})

    def concat(self, other: "Dataset") -> "Dataset":
        videos = dict(self.videos)
        for vid, meta in other.videos.items():
            if vid in videos and videos[vid] != meta:
                raise ValueError(f"conflicting metadata for video {vid!r}")
            videos[vid] = meta
        return Dataset(self.frames + other.frames, videos)

    def __add__(self, other: "Dataset") -> "Dataset":
        return self.concat(other)


# ---------------------------------------------------------------------------
# parsing

Source = Union[TextIO, Iterable[str], str]


def _lines(stream: Source) -> Iterable[str]:
    if isinstance(stream, str):
        return stream.splitlines()
    return stream


def _parse_number(token: str, what: str, lineno: int, source: str | None) -> float:
    try:
        value = float(token)
    except ValueError:
        raise AnnotationError(f"{what} is not a number: {token!r}", lineno, source) from None
    if not math.isfinite(value):
        raise AnnotationError(f"{what} must be finite: {token!r}", lineno, source)
    return value


def _parse(stream: Source, with_score: bool, manifest, source: str | None) -> Dataset:
    n_fields = 8 if with_score else 7
    grouped: dict[FrameKey, list] = {}
    for lineno, raw in enumerate(_lines(stream), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != n_fields:
            raise AnnotationError(f"expected {n_fields} fields, got {len(parts)}", lineno, source)
        video_id, frame_tok, label = parts[0], parts[1], parts[2]
        if not video_id:
            raise AnnotationError("empty video_id", lineno, source)
        if not (frame_tok.isascii() and frame_tok.isdigit()):
            raise AnnotationError(f"frame_index must be a non-negative integer: {frame_tok!r}", lineno, source)
        try:
            cls = FeatureClass.parse(label)
        except ValueError as exc:
            raise AnnotationError(str(exc), lineno, source) from None
        offset = 3
        score = None
        if with_score:
            score = _parse_number(parts[3], "score", lineno, source)
            if not 0.0 <= score <= 1.0:
                raise AnnotationError(f"score must lie in [0, 1], got {parts[3]}", lineno, source)
            offset = 4
        coords = [_parse_number(t, "coordinate", lineno, source) for t in parts[offset:offset + 4]]
        if min(coords) < 0:
            raise AnnotationError(f"coordinates must be non-negative, got {coords}", lineno, source)
        try:
            box = BoundingBox(*coords)
        except ValueError as exc:
            raise AnnotationError(f"invalid box: {exc}", lineno, source) from None
        item = Detection(box, cls, score) if with_score else (box, cls)
        grouped.setdefault((video_id, int(frame_tok)), []).append(item)

    frames = [FrameAnnotations(v, i, tuple(items)) for (v, i), items in grouped.items()]
    if manifest is None:
        return Dataset.build(frames)
    videos = load_manifest(manifest) if not isinstance(manifest, Mapping) or "videos" in manifest else dict(manifest)
    for f in frames:
        if f.video_id not in videos:
            raise AnnotationError(f"video {f.video_id!r} is not declared in the manifest", None, source)
    return Dataset(frames, videos)


def parse_ground_truth(stream: Source, manifest=None, source: str | None = None) -> Dataset:
    """Parse ground-truth CSV text (a file object, an iterable of lines or a string)."""
    return _parse(stream, False, manifest, source)


def parse_predictions(stream: Source, manifest=None, source: str | None = None) -> Dataset:
    """Parse prediction CSV text; like :func:`parse_ground_truth` with a score column."""
    return _parse(stream, True, manifest, source)


def read_ground_truth(path: str | PathLike, manifest=None) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_ground_truth(fh, manifest, source=str(path))


def read_predictions(path: str | PathLike, manifest=None) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_predictions(fh, manifest, source=str(path))


def _fmt(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def serialize_ground_truth(d: Dataset) -> str:
    out = io.StringIO()
    out.write(GT_HEADER + "\n")
    for f in d.frames:
        for box, cls in f.ground_truth():
            coords = ",".join(_fmt(c) for c in box.as_tuple())
            out.write(f"{f.video_id},{f.frame_index},{cls.value},{coords}\n")
    return out.getvalue()


def serialize_predictions(d: Dataset) -> str:
    out = io.StringIO()
    out.write(PRED_HEADER + "\n")
    for f in d.frames:
        for det in f.detections():
            coords = ",".join(_fmt(c) for c in det.box.as_tuple())
            out.write(f"{f.video_id},{f.frame_index},{det.cls.value},{_fmt(det.score)},{coords}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# manifest

def load_manifest(source) -> dict[str, VideoMeta]:
    """Read a manifest from a path, a JSON string or an already-decoded mapping."""
    if isinstance(source, Mapping):
        data = source
    elif isinstance(source, (str, PathLike)) and not str(source).lstrip().startswith("{"):
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    elif isinstance(source, (str, bytes)):
        data = json.loads(source)
    else:
        raise AnnotationError(f"manifest must be a JSON object, got {type(source).__name__}")
    videos = data.get("videos") if isinstance(data, Mapping) else None
    if not isinstance(videos, Mapping):
        raise AnnotationError('manifest must contain a "videos" object')
    out = {}
    for vid, meta in videos.items():
        if meta is not None and not isinstance(meta, Mapping):
            raise AnnotationError(f"video {vid!r}: metadata must be an object")
        meta = dict(meta or {})
        unknown = set(meta) - {"condition", "age_hours", "frame_rate"}
        if unknown:
            raise AnnotationError(f"video {vid!r}: unknown manifest keys {sorted(unknown)}")
        try:
            out[vid] = VideoMeta(
                condition=meta.get("condition"),
                age_hours=None if meta.get("age_hours") is None else float(meta["age_hours"]),
                frame_rate=float(meta.get("frame_rate", DEFAULT_FRAME_RATE)),
            )
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"video {vid!r}: {exc}") from None
    return out


def dump_manifest(videos: Mapping[str, VideoMeta] | Dataset) -> str:
    if isinstance(videos, Dataset):
        videos = videos.videos
    doc = {"videos": {vid: meta.to_dict() for vid, meta in sorted(videos.items())}}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# statistics

REFERENCE_CLASS_COUNTS: dict[FeatureClass, int] = {
    FeatureClass.ALines: 1114,
    FeatureClass.NormalPleura: 374,
    FeatureClass.IrregularPleura: 216,
    FeatureClass.ThickPleura: 269,
    FeatureClass.CoalescentBLines: 236,
    FeatureClass.SeparateBLines: 75,
    FeatureClass.Consolidation: 227,
}


@dataclass(frozen=True)
class DatasetStats:
    class_counts: dict[FeatureClass, int]
    frames_per_video: dict[str, int]

    @property
    def total_boxes(self) -> int:
        return sum(self.class_counts.values())

    def __add__(self, other: "DatasetStats") -> "DatasetStats":
        classes = {c: self.class_counts[c] + other.class_counts[c] for c in FeatureClass}
        videos = Counter(self.frames_per_video)
        videos.update(other.frames_per_video)
        return DatasetStats(classes, dict(sorted(videos.items())))

    def to_dict(self) -> dict:
        return {
            "class_counts": {c.value: n for c, n in self.class_counts.items()},
            "total_boxes": self.total_boxes,
            "frames_per_video": dict(self.frames_per_video),
        }


def dataset_stats(d: Dataset) -> DatasetStats:
    counts = Counter(cls for f in d.frames for _, cls in f.ground_truth())
    per_video = Counter(f.video_id for f in d.frames)
    return DatasetStats({c: counts.get(c, 0) for c in FeatureClass}, dict(sorted(per_video.items())))


# ---------------------------------------------------------------------------
# splits

REFERENCE_SPLIT: dict[ConditionClass, tuple[int, int]] = {
    ConditionClass.RDS: (63, 12),
    ConditionClass.TTN: (67, 8),
    ConditionClass.PDA: (65, 10),
    ConditionClass.CLD: (77, 8),
    ConditionClass.Normal: (101, 11),
}


def split_dataset(
    d: Dataset,
    test_fraction: float,
    seed: int,
    stratify_by: str = "condition",
) -> tuple[Dataset, Dataset]:
    """Seeded, stratified train/test partition of frames.

    Frames are grouped by video condition (``stratify_by="condition"``) or by
    video (``"video"``). Each group of n frames contributes
    ``floor(n * test_fraction + 0.5)`` test frames, clamped to ``[1, n - 1]``,
    drawn with a PCG64 generator seeded by ``seed``.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if stratify_by not in ("condition", "video"):
        raise ValueError(f"stratify_by must be 'condition' or 'video', got {stratify_by!r}")

    strata: dict[str, list[FrameKey]] = {}
    for f in d.frames:
        if stratify_by == "video":
            label = f.video_id
        else:
            cond = d.condition_of(f.video_id)
            label = cond.value if cond is not None else ""
        strata.setdefault(label, []).append(f.key)

    rng = np.random.default_rng(seed)
    test_keys: list[FrameKey] = []
    for label in sorted(strata):
        keys = strata[label]
        n = len(keys)
        if n < 2:
            raise ValueError(f"stratum {label or '<no condition>'!r} has {n} frame(s); need at least 2 to split")
        n_test = min(max(math.floor(n * test_fraction + 0.5), 1), n - 1)
        perm = rng.permutation(n)
        test_keys.extend(keys[i] for i in sorted(perm[:n_test]))
    test_set = set(test_keys)
    train = d.subset(k for k in d.keys() if k not in test_set)
    test = d.subset(test_set)
    return train, test


def split_manifest(train: Dataset, test: Dataset) -> str:
    """JSON listing the frame keys of each side of a split."""
    doc = {
        "train": [[v, i] for v, i in train.keys()],
        "test": [[v, i] for v, i in test.keys()],
    }
    return json.dumps(doc, indent=1) + "\n"


def split_counts(train: Dataset, test: Dataset) -> dict[ConditionClass, tuple[int, int]]:
    """Frames per condition on each side of a split."""
    out: dict[ConditionClass, list[int]] = {}
    for side, d in enumerate((train, test)):
        for f in d.frames:
            cond = d.condition_of(f.video_id)
            if cond is None:
                raise ValueError(f"video {f.video_id!r} has no condition")
            out.setdefault(cond, [0, 0])[side] += 1
    return {c: (a, b) for c, (a, b) in sorted(out.items(), key=lambda kv: kv[0].value)}


def load_split_counts(source, dataset: Dataset | None = None) -> dict[ConditionClass, tuple[int, int]]:
    """Per-condition (train, test) frame counts from a split manifest.

    Accepts either a counts document ``{"conditions": {"RDS": {"train": 63,
    "test": 12}, ...}}`` or a frame-list document as written by
    :func:`split_manifest`, in which case ``dataset`` supplies the conditions.
    """
    if isinstance(source, Mapping):
        data = source
    elif isinstance(source, (str, PathLike)) and not str(source).lstrip().startswith("{"):
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        data = json.loads(source)
    if "conditions" in data:
        return {
            ConditionClass.parse(c): (int(v["train"]), int(v["test"]))
            for c, v in data["conditions"].items()
        }
    if dataset is None:
        raise ValueError("a frame-list split manifest needs the dataset to resolve conditions")
    train = dataset.subset((v, int(i)) for v, i in data["train"])
    test = dataset.subset((v, int(i)) for v, i in data["test"])
    if len(train) != len(data["train"]) or len(test) != len(data["test"]):
        raise ValueError("split manifest references frames missing from the dataset")
    if set(train.keys()) & set(test.keys()):
        raise ValueError("split manifest sides overlap")
    return split_counts(train, test)


def check_split_counts(
    counts: Mapping[ConditionClass, tuple[int, int]],
    expected: Mapping[ConditionClass, tuple[int, int]] = REFERENCE_SPLIT,
) -> None:
    """Raise ``ValueError`` listing every condition whose counts differ from ``expected``."""
    problems = []
    for cond in sorted(set(counts) | set(expected), key=lambda c: c.value):
        got, want = counts.get(cond), expected.get(cond)
        if tuple(got or ()) != tuple(want or ()):
            problems.append(f"{cond.value}: got {got}, expected {want}")
    if problems:
        raise ValueError("split counts mismatch: " + "; ".join(problems))
