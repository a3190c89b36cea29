"""Reference anchor boxes: counting, generation, labelling and offset coding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from .geometry import BoundingBox, FeatureClass, boxes_to_array, iou_matrix

__all__ = [
    "AnchorConfig",
    "AnchorGrid",
    "BoxOffsets",
    "BACKGROUND",
    "REFERENCE_BOXES",
    "REFERENCE_RATIOS",
    "PRESETS",
    "preset",
    "anchors_per_position",
    "potential_anchor_count",
    "generate_anchors",
    "in_image",
    "label_anchors",
    "encode_offsets",
    "decode_offsets",
]

BACKGROUND = -1

# (feature, box coordinates, listed height:width ratio as (numerator, denominator))
REFERENCE_BOXES: tuple[tuple[FeatureClass, tuple[int, int, int, int], tuple[int, int]], ...] = (
    (FeatureClass.ALines, (49, 149, 168, 180), (31, 119)),
    (FeatureClass.NormalPleura, (53, 60, 174, 88), (28, 121)),
    (FeatureClass.NormalPleura, (38, 71, 138, 97), (26, 100)),
    (FeatureClass.ThickPleura, (416, 94, 484, 121), (27, 68)),
    (FeatureClass.IrregularPleura, (191, 53, 365, 80), (27, 175)),
    (FeatureClass.IrregularPleura, (182, 46, 441, 72), (26, 259)),
    (FeatureClass.SeparateBLines, (269, 82, 444, 450), (368, 175)),
    (FeatureClass.CoalescentBLines, (26, 313, 468, 466), (153, 442)),
    (FeatureClass.CoalescentBLines, (108, 201, 410, 325), (124, 302)),
    (FeatureClass.Consolidation, (214, 79, 433, 156), (77, 219)),
    (FeatureClass.Consolidation, (6, 114, 308, 247), (133, 302)),
    (FeatureClass.Consolidation, (190, 84, 363, 155), (71, 173)),
)

REFERENCE_RATIOS: tuple[Fraction, ...] = tuple(Fraction(n, d) for _, _, (n, d) in REFERENCE_BOXES)


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor scales, height:width ratios and feature-map geometry.

    ``scales`` are anchor side lengths in image pixels (an anchor of scale s
    has area s**2). ``stride`` is the number of image pixels per feature-map
    cell.
    """

    scales: tuple[float, ...]
    ratios: tuple[Fraction, ...]
    feature_map_width: int = 1
    feature_map_height: int = 1
    feature_map_depth: int = 1
    stride: float = 16.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(_as_fraction(r) for r in self.ratios))
        if not self.scales or not self.ratios:
            raise ValueError("scales and ratios must be non-empty")
        if any(not (s > 0 and math.isfinite(s)) for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if any(r <= 0 for r in self.ratios):
            raise ValueError(f"ratios must be positive, got {self.ratios}")
        for name in ("feature_map_width", "feature_map_height", "feature_map_depth"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.stride > 0 and math.isfinite(self.stride)):
            raise ValueError(f"stride must be positive, got {self.stride}")

    def with_feature_map(self, width: int, height: int, depth: int = 1) -> "AnchorConfig":
        return AnchorConfig(self.scales, self.ratios, width, height, depth, self.stride)

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "ratios": [f"{r.numerator}/{r.denominator}" for r in self.ratios],
            "feature_map": [self.feature_map_width, self.feature_map_height, self.feature_map_depth],
            "stride": self.stride,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnchorConfig":
        """Build from a config mapping; ``preset`` supplies defaults for missing keys."""
        base = preset(data["preset"]) if "preset" in data else None
        fmap = data.get("feature_map")
        if fmap is None and base is not None:
            fmap = [base.feature_map_width, base.feature_map_height, base.feature_map_depth]
        fmap = list(fmap or [1, 1, 1])
        if len(fmap) == 2:
            fmap.append(1)
        return cls(
            scales=tuple(data.get("scales", base.scales if base else ())),
            ratios=tuple(data.get("ratios", base.ratios if base else ())),
            feature_map_width=int(fmap[0]),
            feature_map_height=int(fmap[1]),
            feature_map_depth=int(fmap[2]),
            stride=float(data.get("stride", base.stride if base else 16.0)),
        )


def _as_fraction(r) -> Fraction:
    if isinstance(r, Fraction):
        return r
    if isinstance(r, str):
        return Fraction(r.strip())
    if isinstance(r, float):
        # decimals from config files are meant as written, not as binary floats
        return Fraction(repr(r))
    return Fraction(r)


# RetinaNet scales are stored exactly as reported; they read like multipliers of a
# base size rather than pixels, so treat their pixel interpretation with care.
PRESETS: dict[str, AnchorConfig] = {
    "paper-frcnn": AnchorConfig(scales=(32, 64, 128, 256), ratios=REFERENCE_RATIOS),
    "paper-retinanet": AnchorConfig(scales=(0.25, 2, 5), ratios=REFERENCE_RATIOS),
}


def preset(name: str) -> AnchorConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown anchor preset {name!r}; known: {sorted(PRESETS)}") from None


def anchors_per_position(config: AnchorConfig) -> int:
    return len(config.scales) * len(config.ratios)


def potential_anchor_count(config: AnchorConfig) -> int:
    return (
        config.feature_map_width
        * config.feature_map_height
        * config.feature_map_depth
        * anchors_per_position(config)
    )


@dataclass(frozen=True)
class AnchorGrid:
    """Generated anchors as an ``(N, 4)`` xyxy array plus their origin.

    ``origins`` has columns ``(depth, cell_x, cell_y, scale_index, ratio_index)``.
    Ordering is depth slice, then row-major cells, then scale, then ratio.
    """

    config: AnchorConfig
    boxes: np.ndarray
    origins: np.ndarray
    image_width: float
    image_height: float

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, i: int) -> BoundingBox:
        return BoundingBox(*(float(v) for v in self.boxes[i]))

    def __iter__(self) -> Iterator[BoundingBox]:
        for i in range(len(self)):
            yield self[i]

    def ratio_of(self, i: int) -> Fraction:
        return self.config.ratios[int(self.origins[i, 4])]

    def scale_of(self, i: int) -> float:
        return self.config.scales[int(self.origins[i, 3])]

    def inside_mask(self) -> np.ndarray:
        b = self.boxes
        return (b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 2] <= self.image_width) & (b[:, 3] <= self.image_height)


def generate_anchors(config: AnchorConfig, image_width: float, image_height: float) -> AnchorGrid:
    """Place every (scale, ratio) anchor at every feature-map cell centre.

    Cell ``(i, j)`` is centred at ``((i + 0.5) * stride, (j + 0.5) * stride)``.
    An anchor of scale s and ratio r is ``s / sqrt(r)`` wide and ``s * sqrt(r)``
    tall. Anchors crossing the image border are kept unclipped; see
    :func:`in_image`.
    """
    if not config.stride > 0:
        raise ValueError("stride must be positive")
    if not (image_width > 0 and image_height > 0):
        raise ValueError("image dimensions must be positive")

    scales = np.asarray(config.scales, dtype=np.float64)
    sqrt_r = np.sqrt(np.array([float(r) for r in config.ratios]))
    # (S, R) template sizes
    widths = scales[:, None] / sqrt_r[None, :]
    heights = scales[:, None] * sqrt_r[None, :]
    k = widths.size

    W, H, D = config.feature_map_width, config.feature_map_height, config.feature_map_depth
    jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cx = ((ii.ravel() + 0.5) * config.stride)[:, None]
    cy = ((jj.ravel() + 0.5) * config.stride)[:, None]
    w = widths.ravel()[None, :]
    h = heights.ravel()[None, :]
    layer = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1).reshape(-1, 4)

    s_idx, r_idx = np.divmod(np.arange(k), len(config.ratios))
    cell_origin = np.column_stack([
        np.repeat(ii.ravel(), k),
        np.repeat(jj.ravel(), k),
        np.tile(s_idx, W * H),
        np.tile(r_idx, W * H),
    ])
    boxes = np.tile(layer, (D, 1))
    origins = np.column_stack([np.repeat(np.arange(D), len(layer)), np.tile(cell_origin, (D, 1))])
    return AnchorGrid(config, boxes, origins.astype(np.int64), float(image_width), float(image_height))


def in_image(anchor: BoundingBox, image_width: float, image_height: float) -> bool:
    return anchor.xmin >= 0 and anchor.ymin >= 0 and anchor.xmax <= image_width and anchor.ymax <= image_height


def label_anchors(
    grid: AnchorGrid | np.ndarray | Sequence[BoundingBox],
    gt: Sequence[tuple[BoundingBox, FeatureClass]],
    fg_threshold: float = 0.5,
) -> np.ndarray:
    """Assign each anchor to its best-overlapping ground-truth box.

    Returns an int array: the index into ``gt`` for foreground anchors (best
    IoU strictly greater than ``fg_threshold``), :data:`BACKGROUND` otherwise.
    IoU ties go to the lowest ground-truth index.
    """
    if not (0.0 < fg_threshold <= 1.0):
        raise ValueError(f"fg_threshold must lie in (0, 1], got {fg_threshold}")
    anchors = _anchor_array(grid)
    labels = np.full(len(anchors), BACKGROUND, dtype=np.int64)
    if len(gt) == 0 or len(anchors) == 0:
        return labels
    overlaps = iou_matrix(anchors, boxes_to_array(b for b, _ in gt))
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(anchors)), best]
    fg = best_iou > fg_threshold
    if fg_threshold == 1.0:
        # IoU can round to exactly 1.0 only for identical boxes, never above
        fg = np.all(anchors == boxes_to_array(b for b, _ in gt)[best], axis=1)
    labels[fg] = best[fg]
    return labels


def _anchor_array(grid) -> np.ndarray:
    if isinstance(grid, AnchorGrid):
        return grid.boxes
    if isinstance(grid, np.ndarray):
        return grid.reshape(-1, 4).astype(np.float64)
    return boxes_to_array(grid)


@dataclass(frozen=True)
class BoxOffsets:
    """Centre shifts relative to anchor size and log size ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"offsets must be finite, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


def encode_offsets(anchor: BoundingBox, gt: BoundingBox) -> BoxOffsets:
    ax, ay = anchor.center
    gx, gy = gt.center
    return BoxOffsets(
        tx=(gx - ax) / anchor.width,
        ty=(gy - ay) / anchor.height,
        tw=math.log(gt.width / anchor.width),
        th=math.log(gt.height / anchor.height),
    )


def decode_offsets(anchor: BoundingBox, off: BoxOffsets) -> BoundingBox:
    ax, ay = anchor.center
    cx = ax + off.tx * anchor.width
    cy = ay + off.ty * anchor.height
    w = anchor.width * math.exp(off.tw)
    h = anchor.height * math.exp(off.th)
    return BoundingBox.from_center(cx, cy, w, h)
