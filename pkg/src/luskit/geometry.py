"""Axis-aligned box arithmetic, IoU and per-class non-maximum suppression.

Boxes use continuous pixel coordinates (x to the right, y downward) and the
open-interval area convention: a box ``(0, 0, 1, 1)`` has area 1, with no
``+1`` pixel correction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BoundingBox",
    "FeatureClass",
    "Detection",
    "area",
    "iou",
    "iou_matrix",
    "aspect_ratio",
    "exact_aspect_ratio",
    "nms",
    "boxes_to_array",
]


class FeatureClass(str, Enum):
    """The seven lung-ultrasound features a detector emits."""

    ALines = "ALines"
    NormalPleura = "NormalPleura"
    ThickPleura = "ThickPleura"
    IrregularPleura = "IrregularPleura"
    CoalescentBLines = "CoalescentBLines"
    SeparateBLines = "SeparateBLines"
    Consolidation = "Consolidation"

    @classmethod
    def parse(cls, label: str) -> "FeatureClass":
        # exact, case-sensitive tokens only
        try:
            return cls(label)
        except ValueError:
            raise ValueError(f"unknown feature class {label!r}") from None

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]

    def __str__(self) -> str:
        return self.value


_DISPLAY_NAMES = {
    FeatureClass.ALines: "A-lines",
    FeatureClass.NormalPleura: "Normal Pleura",
    FeatureClass.ThickPleura: "Thick Pleura",
    FeatureClass.IrregularPleura: "Irregular Pleura",
    FeatureClass.CoalescentBLines: "Coalescent B-lines",
    FeatureClass.SeparateBLines: "Separate B-lines",
    FeatureClass.Consolidation: "Consolidations",
}


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box ``(xmin, ymin, xmax, ymax)`` with positive extent.

    Only finiteness and positive width/height are enforced here. Anchors and
    decoded regressions may legitimately hang over the image edge, so the
    non-negative-coordinate rule for annotations is checked by the parsers.
    """

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        coords = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not self.xmax > self.xmin:
            raise ValueError(f"xmax must exceed xmin, got {coords}")
        if not self.ymax > self.ymin:
            raise ValueError(f"ymax must exceed ymin, got {coords}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self) -> tuple[float, float]:
        return (self.xmin + 0.5 * self.width, self.ymin + 0.5 * self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def is_nonnegative(self) -> bool:
        return self.xmin >= 0 and self.ymin >= 0

    @classmethod
    def from_center(cls, cx: float, cy: float, width: float, height: float) -> "BoundingBox":
        return cls(cx - 0.5 * width, cy - 0.5 * height, cx + 0.5 * width, cy + 0.5 * height)


@dataclass(frozen=True)
class Detection:
    """A scored, classified box."""

    box: BoundingBox
    cls: FeatureClass
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if not isinstance(self.cls, FeatureClass):
            object.__setattr__(self, "cls", FeatureClass.parse(self.cls))


def area(b: BoundingBox) -> float:
    return (b.xmax - b.xmin) * (b.ymax - b.ymin)


def iou(b1: BoundingBox, b2: BoundingBox) -> float:
    """Intersection over union of two boxes; 0.0 when they do not overlap."""
    iw = min(b1.xmax, b2.xmax) - max(b1.xmin, b2.xmin)
    ih = min(b1.ymax, b2.ymax) - max(b1.ymin, b2.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area(b1) + area(b2) - inter)


def boxes_to_array(boxes: Iterable[BoundingBox]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xyxy arrays, shape ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def aspect_ratio(b: BoundingBox) -> float:
    """Height over width."""
    return (b.ymax - b.ymin) / (b.xmax - b.xmin)


def exact_aspect_ratio(b: BoundingBox) -> Fraction:
    """Height over width as an exact rational (binary floats convert exactly)."""
    height = Fraction(b.ymax) - Fraction(b.ymin)
    width = Fraction(b.xmax) - Fraction(b.xmin)
    return height / width


def nms(dets: Sequence[Detection], score_thresh: float, nms_iou: float) -> list[Detection]:
    """Score filtering followed by greedy per-class non-maximum suppression.

    Detections scoring below ``score_thresh`` are dropped. Within each class the
    highest-scoring detection is kept and every same-class detection whose IoU
    with it is strictly greater than ``nms_iou`` is removed; repeat. Equal
    scores keep input order. The result is sorted by descending score.
    """
    if not (0.0 <= score_thresh <= 1.0):
        raise ValueError(f"score_thresh must lie in [0, 1], got {score_thresh}")
    if not (0.0 <= nms_iou <= 1.0):
        raise ValueError(f"nms_iou must lie in [0, 1], got {nms_iou}")

    # stable sort: ties keep input order
    order = sorted(
        (i for i, d in enumerate(dets) if d.score >= score_thresh),
        key=lambda i: -dets[i].score,
    )
    kept: list[int] = []
    kept_by_class: dict[FeatureClass, list[BoundingBox]] = {}
    for i in order:
        d = dets[i]
        survivors = kept_by_class.setdefault(d.cls, [])
        if any(iou(d.box, k) > nms_iou for k in survivors):
            continue
        survivors.append(d.box)
        kept.append(i)
    return [dets[i] for i in kept]
