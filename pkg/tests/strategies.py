"""Hypothesis strategies and seeded generators for boxes and datasets."""
from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from luskit.annotations import Dataset, FrameAnnotations, VideoMeta
from luskit.geometry import BoundingBox, Detection, FeatureClass

CLASSES = list(FeatureClass)


@st.composite
def boxes(draw, max_coord=1000.0, integer=False):
    if integer:
        x0 = draw(st.integers(0, int(max_coord) - 1))
        y0 = draw(st.integers(0, int(max_coord) - 1))
        x1 = draw(st.integers(x0 + 1, int(max_coord)))
        y1 = draw(st.integers(y0 + 1, int(max_coord)))
        return BoundingBox(x0, y0, x1, y1)
    coord = st.floats(0, max_coord, allow_nan=False, allow_infinity=False)
    x0, y0 = draw(coord), draw(coord)
    w = draw(st.floats(0.5, max_coord, allow_nan=False))
    h = draw(st.floats(0.5, max_coord, allow_nan=False))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


@st.composite
def detections(draw, classes=CLASSES, max_coord=60):
    return Detection(
        draw(boxes(max_coord=max_coord, integer=True)),
        draw(st.sampled_from(classes)),
        draw(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.85, 0.9, 1.0])),
    )


video_ids = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-.", min_size=1, max_size=8)
coords = st.one_of(
    st.integers(0, 2000).map(float),
    st.floats(0, 2000, allow_nan=False, allow_infinity=False),
)


@st.composite
def _box_any(draw):
    x0, y0 = draw(coords), draw(coords)
    w = draw(st.one_of(st.integers(1, 500).map(float), st.floats(1e-3, 500, allow_nan=False)))
    h = draw(st.one_of(st.integers(1, 500).map(float), st.floats(1e-3, 500, allow_nan=False)))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


@st.composite
def datasets(draw, predictions=False, max_frames=6, max_boxes=5):
    keys = draw(st.lists(st.tuples(video_ids, st.integers(0, 10_000)), max_size=max_frames, unique=True))
    frames = []
    for vid, idx in keys:
        n = draw(st.integers(1, max_boxes))
        items = []
        for _ in range(n):
            box = draw(_box_any())
            cls = draw(st.sampled_from(CLASSES))
            if predictions:
                score = draw(st.one_of(st.sampled_from([0.0, 0.5, 1.0]), st.floats(0, 1, allow_nan=False)))
                items.append(Detection(box, cls, score))
            else:
                items.append((box, cls))
        frames.append(FrameAnnotations(vid, idx, tuple(items)))
    return Dataset.build(frames)


def random_micro_dataset(rng: np.random.Generator, classes=CLASSES[:3], max_frames=5, max_boxes=6, grid=24):
    """GT and prediction datasets with heavy overlap, shared scores and empty frames."""
    n_frames = int(rng.integers(1, max_frames + 1))
    score_pool = np.array([0.2, 0.4, 0.5, 0.6, 0.75, 0.9, 1.0])

    def box():
        x0, y0 = rng.integers(0, grid - 1, size=2)
        x1 = rng.integers(x0 + 1, grid + 1)
        y1 = rng.integers(y0 + 1, grid + 1)
        return BoundingBox(float(x0), float(y0), float(x1), float(y1))

    gt_frames, pred_frames = [], []
    for i in range(n_frames):
        g = [(box(), classes[int(rng.integers(len(classes)))]) for _ in range(int(rng.integers(0, max_boxes + 1)))]
        p = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            if g and rng.random() < 0.6:
                # near-copy of a GT box so matches actually happen
                b, c = g[int(rng.integers(len(g)))]
                d = rng.integers(-2, 3, size=4)
                x0, y0 = max(b.xmin + d[0], 0), max(b.ymin + d[1], 0)
                nb = BoundingBox(x0, y0, max(b.xmax + d[2], x0 + 1), max(b.ymax + d[3], y0 + 1))
                if rng.random() < 0.15:
                    c = classes[int(rng.integers(len(classes)))]
            else:
                nb, c = box(), classes[int(rng.integers(len(classes)))]
            p.append(Detection(nb, c, float(score_pool[int(rng.integers(len(score_pool)))])))
        gt_frames.append(FrameAnnotations("v", i, tuple(g)))
        if p:
            pred_frames.append(FrameAnnotations("v", i, tuple(p)))
    if not any(f.boxes for f in gt_frames):
        gt_frames[0] = FrameAnnotations("v", 0, ((box(), classes[0]),))
    videos = {"v": VideoMeta()}
    return Dataset(tuple(gt_frames), videos), Dataset(tuple(pred_frames), videos)


def plain_frames(gt: Dataset, preds: Dataset):
    """Convert datasets to the tuple form the oracles consume, in GT frame order."""
    pmap = preds.by_key()
    out = []
    for f in gt.frames:
        p = pmap.get(f.key)
        pd = [(d.cls, d.score, d.box.as_tuple()) for d in (p.detections() if p else [])]
        gd = [(c, b.as_tuple()) for b, c in f.ground_truth()]
        out.append((pd, gd))
    return out
