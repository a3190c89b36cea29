"""Seeded synthetic scenarios: ground truth per condition and perturbed predictions.

Randomness comes from numpy's PCG64 bit generator. Frame ``i`` of a scenario
seeded with ``s`` draws from ``default_rng([s, i])``, and perturbation of frame
``i`` of video ``v`` from ``default_rng([s, i, 1, crc32(v)])``, so any frame can
be regenerated on its own and output does not depend on iteration order.

Box templates are loose plausibility ranges around the reference boxes of
each feature (pleura in an upper band, B-lines tall and deep, consolidations
mid-image). They make no claim about real anatomy.
"""
from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .annotations import ConditionClass, Dataset, FrameAnnotations, VideoMeta
from .geometry import BoundingBox, Detection, FeatureClass

__all__ = [
    "BoxTemplate",
    "BOX_TEMPLATES",
    "CONDITION_FEATURES",
    "ScenarioProfile",
    "PerturbationConfig",
    "generate_ground_truth",
    "perturb",
]

F = FeatureClass


@dataclass(frozen=True)
class BoxTemplate:
    """Uniform ranges for box size and centre, in pixels of a 512x512 image."""

    width: tuple[float, float]
    height: tuple[float, float]
    cx: tuple[float, float]
    cy: tuple[float, float]


BOX_TEMPLATES: dict[FeatureClass, BoxTemplate] = {
    F.ALines: BoxTemplate((100, 170), (20, 40), (100, 400), (150, 300)),
    F.NormalPleura: BoxTemplate((90, 130), (20, 30), (90, 420), (60, 110)),
    F.ThickPleura: BoxTemplate((60, 120), (25, 35), (90, 420), (80, 120)),
    F.IrregularPleura: BoxTemplate((170, 260), (24, 30), (130, 380), (55, 95)),
    F.SeparateBLines: BoxTemplate((140, 200), (300, 370), (110, 400), (250, 300)),
    F.CoalescentBLines: BoxTemplate((250, 440), (120, 160), (150, 360), (250, 400)),
    F.Consolidation: BoxTemplate((170, 300), (70, 135), (150, 360), (110, 200)),
}

# Required feature groups per condition; a frame carries one member of each
# group (both members of ThickPleura/IrregularPleura are allowed for RDS).
CONDITION_FEATURES: dict[ConditionClass, tuple[tuple[FeatureClass, ...], ...]] = {
    ConditionClass.Normal: ((F.ALines,), (F.NormalPleura,)),
    ConditionClass.TTN: ((F.SeparateBLines,), (F.NormalPleura,)),
    ConditionClass.RDS: ((F.ThickPleura, F.IrregularPleura), (F.Consolidation,), (F.CoalescentBLines,)),
    ConditionClass.CLD: ((F.IrregularPleura,), (F.ThickPleura,), (F.Consolidation,), (F.CoalescentBLines,)),
    ConditionClass.PDA: ((F.NormalPleura, F.ThickPleura), (F.Consolidation,), (F.CoalescentBLines,)),
}


@dataclass(frozen=True)
class ScenarioProfile:
    condition: ConditionClass
    frames: int
    image_width: int = 512
    image_height: int = 512
    video_id: str | None = None
    age_hours: float | None = None
    templates: Mapping[FeatureClass, BoxTemplate] = field(default_factory=lambda: dict(BOX_TEMPLATES))

    def __post_init__(self) -> None:
        if not isinstance(self.condition, ConditionClass):
            object.__setattr__(self, "condition", ConditionClass.parse(self.condition))
        if int(self.frames) < 1:
            raise ValueError(f"frames must be positive, got {self.frames}")
        if self.image_width < 16 or self.image_height < 16:
            raise ValueError("image must be at least 16x16 pixels")

    @property
    def features(self) -> frozenset[FeatureClass]:
        return frozenset(c for group in CONDITION_FEATURES[self.condition] for c in group)

    @property
    def default_age_hours(self) -> float:
        if self.age_hours is not None:
            return self.age_hours
        return 10.0 if self.condition in (ConditionClass.RDS, ConditionClass.TTN) else 72.0


@dataclass(frozen=True)
class PerturbationConfig:
    """Error model for turning ground truth into predictions.

    ``score_mean_tp``/``score_mean_fp`` are means of Beta-distributed scores with
    concentration ``score_concentration``; a mean of exactly 1.0 yields constant
    scores of 1.0.
    """

    jitter_sigma: float = 0.0
    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    score_mean_tp: float = 1.0
    score_mean_fp: float = 0.5
    seed: int = 0
    score_concentration: float = 20.0

    def __post_init__(self) -> None:
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")
        for name in ("drop_rate", "spurious_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("score_mean_tp", "score_mean_fp"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.score_concentration <= 0:
            raise ValueError("score_concentration must be positive")


def _sample_box(rng: np.random.Generator, t: BoxTemplate, img_w: float, img_h: float) -> BoundingBox:
    w = min(rng.uniform(*t.width), img_w - 1)
    h = min(rng.uniform(*t.height), img_h - 1)
    cx = rng.uniform(*t.cx) * img_w / 512.0
    cy = rng.uniform(*t.cy) * img_h / 512.0
    x0 = int(round(min(max(cx - w / 2, 0.0), img_w - w)))
    y0 = int(round(min(max(cy - h / 2, 0.0), img_h - h)))
    x1 = min(x0 + max(int(round(w)), 1), int(img_w))
    y1 = min(y0 + max(int(round(h)), 1), int(img_h))
    return BoundingBox(x0, y0, x1, y1)


def _repeat_below(box: BoundingBox, n: int, img_h: float) -> list[BoundingBox]:
    # A-lines repeat at equal spacing further down; copies never overlap
    step = 2 * box.height
    out = []
    for k in range(1, n + 1):
        if box.ymax + k * step > img_h:
            break
        out.append(BoundingBox(box.xmin, box.ymin + k * step, box.xmax, box.ymax + k * step))
    return out


def generate_ground_truth(profile: ScenarioProfile, seed: int, ledger: Counter | None = None) -> Dataset:
    """Ground truth for one video of ``profile.condition``.

    Every frame carries one box for each required feature group of the
    condition; A-lines may repeat up to three times, equally spaced. Integer pixel
    coordinates inside the image. Each emitted box is counted into ``ledger``
    by class when a Counter is supplied.
    """
    video_id = profile.video_id or f"{profile.condition.value}-{seed}"
    groups = CONDITION_FEATURES[profile.condition]
    frames = []
    for i in range(int(profile.frames)):
        rng = np.random.default_rng([seed, i])
        boxes = []
        for group in groups:
            if len(group) == 1:
                chosen = [group[0]]
            elif profile.condition is ConditionClass.RDS:
                # thickened and/or irregular
                options = [[group[0]], [group[1]], list(group)]
                chosen = options[int(rng.integers(len(options)))]
            else:
                chosen = [group[int(rng.integers(len(group)))]]
            for cls in chosen:
                box = _sample_box(rng, profile.templates[cls], profile.image_width, profile.image_height)
                emitted = [box]
                if cls is F.ALines:
                    emitted += _repeat_below(box, int(rng.integers(0, 3)), profile.image_height)
                for b in emitted:
                    boxes.append((b, cls))
                    if ledger is not None:
                        ledger[cls] += 1
        frames.append(FrameAnnotations(video_id, i, tuple(boxes)))
    meta = VideoMeta(condition=profile.condition, age_hours=profile.default_age_hours)
    return Dataset(tuple(frames), {video_id: meta})


def _score(rng: np.random.Generator, mean: float, concentration: float) -> float:
    if mean >= 1.0:
        return 1.0
    a, b = mean * concentration, (1.0 - mean) * concentration
    return round(float(rng.beta(a, b)), 4)


def _jitter(rng, box: BoundingBox, sigma: float, img_w: float, img_h: float) -> BoundingBox:
    if sigma == 0:
        return box
    d = rng.normal(0.0, sigma, size=4)
    x0 = min(max(box.xmin + d[0], 0.0), img_w - 1)
    y0 = min(max(box.ymin + d[1], 0.0), img_h - 1)
    x1 = min(max(box.xmax + d[2], x0 + 1), img_w)
    y1 = min(max(box.ymax + d[3], y0 + 1), img_h)
    return BoundingBox(round(x0, 2), round(y0, 2), round(x1, 2), round(y1, 2))


def perturb(
    gt: Dataset,
    cfg: PerturbationConfig,
    image_size: tuple[int, int] = (512, 512),
    ledger: Counter | None = None,
) -> Dataset:
    """Predictions derived from ``gt``.

    Each ground-truth box is dropped with probability ``drop_rate``; survivors
    are jittered by Gaussian noise of ``jitter_sigma`` pixels per coordinate
    and scored from the true-positive score model. With probability
    ``spurious_rate`` a frame also gains one detection of a random class from
    the false-positive score model. Frames left without detections are
    omitted. ``ledger`` receives ``kept``, ``dropped`` and ``spurious`` counts.
    """
    img_w, img_h = image_size
    classes = list(FeatureClass)
    frames = []
    for f in gt.frames:
        rng = np.random.default_rng([cfg.seed, f.frame_index, 1, _video_salt(f.video_id)])
        dets = []
        for box, cls in f.ground_truth():
            if rng.random() < cfg.drop_rate:
                if ledger is not None:
                    ledger["dropped"] += 1
                continue
            new_box = _jitter(rng, box, cfg.jitter_sigma, img_w, img_h)
            dets.append(Detection(new_box, cls, _score(rng, cfg.score_mean_tp, cfg.score_concentration)))
            if ledger is not None:
                ledger["kept"] += 1
        if rng.random() < cfg.spurious_rate:
            cls = classes[int(rng.integers(len(classes)))]
            box = _sample_box(rng, BOX_TEMPLATES[cls], img_w, img_h)
            dets.append(Detection(box, cls, _score(rng, cfg.score_mean_fp, cfg.score_concentration)))
            if ledger is not None:
                ledger["spurious"] += 1
        if dets:
            frames.append(FrameAnnotations(f.video_id, f.frame_index, tuple(dets)))
    return Dataset(tuple(frames), dict(gt.videos))


def _video_salt(video_id: str) -> int:
    # stable across processes, unlike hash()
    return zlib.crc32(video_id.encode("utf-8"))
