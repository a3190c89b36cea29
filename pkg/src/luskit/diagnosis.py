"""Scan-level feature presence and rule-based ranking of candidate conditions.

The engine never returns a verdict. It ranks all five conditions by how much
of each condition's feature pattern is present and reports the matched,
missing and conflicting evidence so a clinician can weigh it.

Rule file schema (JSON)::

    {"rules": [
        {"condition": "RDS",
         "requires": [["ThickPleura", "IrregularPleura"], ["Consolidation"], ...],
         "incompatible": ["NormalPleura"],
         "conditional_incompatible": [{"feature": "IrregularPleura", "unless_full_match": "CLD"}],
         "age_hours": {"upper": 24},
         "note": "free text"},
        ...]}

Each ``requires`` entry is a group satisfied by any one member. ``age_hours``
takes an inclusive ``upper`` and an exclusive ``lower`` bound. The built-in
file is ``luskit/data/table1.json``; ``LUSKIT_RULES`` overrides it.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from importlib import resources
from os import PathLike
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

from .annotations import ConditionClass
from .geometry import BoundingBox, Detection, FeatureClass

__all__ = [
    "CalibrationConfig",
    "PleuraThickness",
    "BLineSpacing",
    "FeaturePresence",
    "ScanFeatureSummary",
    "AgeGate",
    "ConditionRule",
    "DiagnosisCandidate",
    "FrameReport",
    "aggregate_scan",
    "classify_pleura_thickness",
    "classify_bline_spacing",
    "recalibrate_pleura",
    "load_rules",
    "rank_conditions",
    "annotate_frame_report",
    "NORMAL_PLEURA_MAX_MM",
    "COALESCENT_MAX_GAP_MM",
]

NORMAL_PLEURA_MAX_MM = 2.0
COALESCENT_MAX_GAP_MM = 3.0
RULES_ENV = "LUSKIT_RULES"


@dataclass(frozen=True)
class CalibrationConfig:
    pixels_per_mm: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.pixels_per_mm) and self.pixels_per_mm > 0):
            raise ValueError(f"pixels_per_mm must be positive and finite, got {self.pixels_per_mm}")


class PleuraThickness(str, Enum):
    WithinNormal = "WithinNormal"
    Thick = "Thick"


class BLineSpacing(str, Enum):
    Separate = "Separate"
    Coalescent = "Coalescent"


def classify_pleura_thickness(box: BoundingBox, calib: CalibrationConfig) -> PleuraThickness:
    """Thick when the box height exceeds 2 mm; exactly 2 mm is still normal."""
    thickness_mm = (box.ymax - box.ymin) / calib.pixels_per_mm
    return PleuraThickness.Thick if thickness_mm > NORMAL_PLEURA_MAX_MM else PleuraThickness.WithinNormal


def classify_bline_spacing(gap_mm: float) -> BLineSpacing:
    """Separate when B-lines are more than 3 mm apart, coalescent otherwise."""
    if not gap_mm >= 0:
        raise ValueError(f"gap_mm must be non-negative, got {gap_mm}")
    return BLineSpacing.Separate if gap_mm > COALESCENT_MAX_GAP_MM else BLineSpacing.Coalescent


def recalibrate_pleura(dets: Iterable[Detection], calib: CalibrationConfig) -> list[Detection]:
    """Relabel normal/thick pleura detections by their measured thickness."""
    out = []
    for d in dets:
        if d.cls in (FeatureClass.NormalPleura, FeatureClass.ThickPleura):
            thick = classify_pleura_thickness(d.box, calib) is PleuraThickness.Thick
            cls = FeatureClass.ThickPleura if thick else FeatureClass.NormalPleura
            if cls is not d.cls:
                d = Detection(d.box, cls, d.score)
        out.append(d)
    return out


# ---------------------------------------------------------------------------
# scan aggregation

@dataclass(frozen=True)
class FeaturePresence:
    present: bool = False
    frame_frequency: float = 0.0
    mean_score: float = 0.0
    frames: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.present and not self.frame_frequency > 0:
            raise ValueError("a present feature needs a positive frame frequency")


@dataclass(frozen=True)
class ScanFeatureSummary:
    features: Mapping[FeatureClass, FeaturePresence] = field(default_factory=dict)
    total_frames: int = 0

    def __getitem__(self, cls: FeatureClass) -> FeaturePresence:
        return self.features.get(cls, FeaturePresence())

    @property
    def present_features(self) -> frozenset[FeatureClass]:
        return frozenset(c for c, p in self.features.items() if p.present)

    @classmethod
    def from_present(cls, present: Iterable[FeatureClass | str]) -> "ScanFeatureSummary":
        """A summary that simply asserts the given features, each seen in every frame."""
        feats = {FeatureClass(c): FeaturePresence(True, 1.0, 1.0, (0,)) for c in present}
        return cls(feats, 1)

    def to_dict(self) -> dict:
        return {
            "total_frames": self.total_frames,
            "features": {
                c.value: {
                    "present": self[c].present,
                    "frame_frequency": self[c].frame_frequency,
                    "mean_score": self[c].mean_score,
                    "frames": list(self[c].frames),
                }
                for c in FeatureClass
            },
        }


def aggregate_scan(
    frames: Sequence[tuple[int, Sequence[Detection]]],
    min_score: float = 0.8,
    min_fraction: float = 0.1,
    min_frames: int = 1,
    total_frames: int | None = None,
) -> ScanFeatureSummary:
    """Collapse per-frame detections of one scan into feature presence.

    A class is present when the number of frames holding a detection of it
    scoring at least ``min_score`` reaches
    ``max(min_frames, ceil(min_fraction * total_frames))``. ``mean_score``
    averages the best qualifying score of each supporting frame.
    ``total_frames`` defaults to ``len(frames)``; pass it when frames without
    detections were left out.
    """
    if not 0.0 <= min_score <= 1.0:
        raise ValueError("min_score must lie in [0, 1]")
    if not (min_fraction > 0 and min_frames > 0):
        raise ValueError("presence thresholds must be positive")
    n = len(frames) if total_frames is None else int(total_frames)
    if n == 0:
        raise ValueError("empty scan")
    if n < len(frames):
        raise ValueError("total_frames is smaller than the number of frames given")
    # decimal semantics: 0.07 * 100 frames needs 7, not 8
    needed = max(int(min_frames), math.ceil(Fraction(repr(float(min_fraction))) * n))

    best: dict[FeatureClass, dict[int, float]] = {}
    for idx, dets in frames:
        for d in dets:
            if d.score >= min_score:
                per_frame = best.setdefault(d.cls, {})
                per_frame[idx] = max(per_frame.get(idx, 0.0), d.score)

    features = {}
    for cls in FeatureClass:
        hits = best.get(cls, {})
        count = len(hits)
        features[cls] = FeaturePresence(
            present=count >= needed,
            frame_frequency=count / n,
            mean_score=math.fsum(hits.values()) / count if count else 0.0,
            frames=tuple(sorted(hits)),
        )
    return ScanFeatureSummary(features, n)


# ---------------------------------------------------------------------------
# rules

@dataclass(frozen=True)
class AgeGate:
    """Age window in hours: ``lower < age <= upper``; None bounds are open."""

    lower: float | None = None
    upper: float | None = None

    def admits(self, age_hours: float | None) -> bool:
        if age_hours is None:
            return True
        if self.lower is not None and not age_hours > self.lower:
            return False
        if self.upper is not None and not age_hours <= self.upper:
            return False
        return True

    def describe(self) -> str:
        if self.lower is None and self.upper is None:
            return "any age"
        parts = []
        if self.lower is not None:
            parts.append(f"> {self.lower:g} h")
        if self.upper is not None:
            parts.append(f"<= {self.upper:g} h")
        return " and ".join(parts)


@dataclass(frozen=True)
class ConditionRule:
    condition: ConditionClass
    requires: tuple[frozenset[FeatureClass], ...]
    incompatible: frozenset[FeatureClass] = frozenset()
    conditional_incompatible: tuple[tuple[FeatureClass, ConditionClass], ...] = ()
    age_gate: AgeGate = AgeGate()
    note: str = ""

    def __post_init__(self) -> None:
        if not self.requires or any(not g for g in self.requires):
            raise ValueError(f"{self.condition.value}: requirement groups must be non-empty")
        required = frozenset().union(*self.requires)
        if required & self.incompatible:
            raise ValueError(f"{self.condition.value}: features both required and incompatible: "
                             f"{sorted(c.value for c in required & self.incompatible)}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConditionRule":
        age = data.get("age_hours") or {}
        return cls(
            condition=ConditionClass.parse(data["condition"]),
            requires=tuple(frozenset(FeatureClass.parse(f) for f in g) for g in data["requires"]),
            incompatible=frozenset(FeatureClass.parse(f) for f in data.get("incompatible", ())),
            conditional_incompatible=tuple(
                (FeatureClass.parse(c["feature"]), ConditionClass.parse(c["unless_full_match"]))
                for c in data.get("conditional_incompatible", ())
            ),
            age_gate=AgeGate(age.get("lower"), age.get("upper")),
            note=data.get("note", ""),
        )

    def satisfied_groups(self, present: frozenset[FeatureClass]) -> int:
        return sum(1 for g in self.requires if g & present)

    def score(self, present: frozenset[FeatureClass]) -> float:
        return self.satisfied_groups(present) / len(self.requires)


def load_rules(source=None) -> list[ConditionRule]:
    """Load a rule set from a path, JSON text or mapping.

    With no argument, ``$LUSKIT_RULES`` is used if set, else the built-in file.
    Every condition must have exactly one rule.
    """
    if source is None:
        source = os.environ.get(RULES_ENV) or None
    if source is None:
        text = resources.files("luskit").joinpath("data/table1.json").read_text(encoding="utf-8")
        data = json.loads(text)
    elif isinstance(source, Mapping):
        data = source
    elif isinstance(source, (str, PathLike)) and not str(source).lstrip().startswith("{"):
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        data = json.loads(source)
    rules = [ConditionRule.from_dict(r) for r in data["rules"]]
    names = [r.condition for r in rules]
    if sorted(names) != sorted(ConditionClass) or len(set(names)) != len(names):
        raise ValueError(f"rule set must cover each condition exactly once, got {[n.value for n in names]}")
    return rules


_DEFAULT_RULES: list[ConditionRule] | None = None


def _default_rules() -> list[ConditionRule]:
    global _DEFAULT_RULES
    if os.environ.get(RULES_ENV):
        return load_rules()
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = load_rules()
    return _DEFAULT_RULES


@dataclass(frozen=True)
class DiagnosisCandidate:
    condition: ConditionClass
    match_score: float
    matched: tuple[FeatureClass, ...]
    missing: tuple[tuple[FeatureClass, ...], ...]
    conflicting: tuple[FeatureClass, ...]
    age_compatible: bool
    rationale: str

    def to_dict(self) -> dict:
        return {
            "condition": self.condition.value,
            "match_score": self.match_score,
            "matched": [c.value for c in self.matched],
            "missing": ["|".join(c.value for c in g) for g in self.missing],
            "conflicting": [c.value for c in self.conflicting],
            "age_compatible": self.age_compatible,
            "rationale": self.rationale,
        }


def _ordered(features: Iterable[FeatureClass]) -> tuple[FeatureClass, ...]:
    rank = {c: i for i, c in enumerate(FeatureClass)}
    return tuple(sorted(set(features), key=rank.__getitem__))


def rank_conditions(
    summary: ScanFeatureSummary | Iterable[FeatureClass],
    age_hours: float | None = None,
    rules: Sequence[ConditionRule] | None = None,
) -> list[DiagnosisCandidate]:
    """Rank every condition against the features present in a scan.

    The match score is the fraction of a condition's requirement groups with
    at least one present feature. Candidates are ordered age-compatible first,
    then by score (descending), fewer conflicts, and condition name. Unknown
    age is treated as compatible with every gate.
    """
    if not isinstance(summary, ScanFeatureSummary):
        summary = ScanFeatureSummary.from_present(summary)
    rules = list(rules) if rules is not None else _default_rules()
    present = summary.present_features
    full = {r.condition for r in rules if r.score(present) == 1.0}

    out = []
    for rule in rules:
        matched = _ordered(c for g in rule.requires for c in g if c in present)
        missing_groups = [g for g in rule.requires if not g & present]
        missing = tuple(_ordered(g) for g in missing_groups)
        conflicts = set(present & rule.incompatible)
        conflicts |= {f for f, unless in rule.conditional_incompatible if f in present and unless not in full}
        conflicting = _ordered(conflicts)
        age_ok = rule.age_gate.admits(age_hours)
        score = rule.score(present)

        why = [f"{rule.satisfied_groups(present)}/{len(rule.requires)} feature groups present"]
        if matched:
            why.append("matched " + ", ".join(c.value for c in matched))
        if missing:
            why.append("missing " + ", ".join("|".join(c.value for c in g) for g in missing))
        why.append("conflicting " + ", ".join(c.value for c in conflicting) if conflicting else "no conflicting features")
        if age_hours is None:
            why.append(f"age unknown (rule: {rule.age_gate.describe()})")
        elif rule.age_gate.lower is None and rule.age_gate.upper is None:
            why.append("any age")
        else:
            verdict = "within" if age_ok else "outside"
            why.append(f"age {age_hours:g} h {verdict} {rule.age_gate.describe()}")
        out.append(DiagnosisCandidate(rule.condition, score, matched, missing, conflicting, age_ok, "; ".join(why)))

    out.sort(key=lambda c: (not c.age_compatible, -c.match_score, len(c.conflicting), c.condition.value))
    return out


# ---------------------------------------------------------------------------
# reports

_COLOURS = {
    FeatureClass.ALines: "#1f77b4",
    FeatureClass.NormalPleura: "#2ca02c",
    FeatureClass.ThickPleura: "#ff7f0e",
    FeatureClass.IrregularPleura: "#d62728",
    FeatureClass.CoalescentBLines: "#9467bd",
    FeatureClass.SeparateBLines: "#8c564b",
    FeatureClass.Consolidation: "#e377c2",
}


@dataclass(frozen=True)
class FrameReport:
    """Detections of one frame with the scan-level candidate list."""

    frame: int | tuple[str, int]
    detections: tuple[Detection, ...]
    candidates: tuple[DiagnosisCandidate, ...]

    def to_dict(self) -> dict:
        frame = list(self.frame) if isinstance(self.frame, tuple) else self.frame
        return {
            "frame": frame,
            "detections": [
                {"class": d.cls.value, "score": d.score, "box": list(d.box.as_tuple())} for d in self.detections
            ],
            "candidates": [c.to_dict() for c in self.candidates],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_svg(self, width: float = 512, height: float = 512) -> str:
        """Transparent overlay: one labelled rectangle per detection."""
        lines = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
            f'viewBox="0 0 {width:g} {height:g}">'
        ]
        for d in self.detections:
            colour = _COLOURS[d.cls]
            b = d.box
            lines.append(
                f'  <g class={quoteattr(d.cls.value)}>'
                f'<rect x="{b.xmin:g}" y="{b.ymin:g}" width="{b.width:g}" height="{b.height:g}" '
                f'fill="none" stroke="{colour}" stroke-width="2"/>'
                f'<text x="{b.xmin:g}" y="{max(b.ymin - 3, 10):g}" fill="{colour}" font-size="12">'
                f"{escape(d.cls.display_name)} {d.score:.2f}</text></g>"
            )
        lines.append("</svg>")
        return "\n".join(lines) + "\n"


def annotate_frame_report(
    frame: int | tuple[str, int],
    detections: Iterable[Detection],
    candidates: Iterable[DiagnosisCandidate],
) -> FrameReport:
    return FrameReport(frame, tuple(detections), tuple(candidates))
