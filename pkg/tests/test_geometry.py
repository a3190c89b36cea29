import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from luskit.geometry import (
    BoundingBox,
    Detection,
    FeatureClass,
    area,
    aspect_ratio,
    exact_aspect_ratio,
    iou,
    iou_matrix,
    nms,
)
from oracles import raster_iou
from strategies import boxes, detections

F = FeatureClass


def det(box, cls=F.ALines, score=0.9):
    return Detection(BoundingBox(*box), cls, score)


class TestBoundingBox:
    @pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1), (0, 0, math.inf, 1), (0, math.nan, 1, 1)])
    def test_rejects_invalid(self, coords):
        with pytest.raises(ValueError):
            BoundingBox(*coords)

    def test_center_and_size(self):
        b = BoundingBox(49, 149, 168, 180)
        assert (b.width, b.height) == (119, 31)
        assert b.center == (108.5, 164.5)


@pytest.mark.parametrize(
    "coords, expected",
    [((0, 0, 1, 1), 1.0), ((0, 0, 2, 3), 6.0), ((49, 149, 168, 180), 3689.0)],
)
def test_area(coords, expected):
    assert area(BoundingBox(*coords)) == expected


class TestIoU:
    def test_identical(self):
        b = BoundingBox(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 6, 6)) == 0.0

    def test_touching_edges_do_not_overlap(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(1, 0, 2, 1)) == 0.0

    def test_partial_overlap(self):
        assert iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes())
    def test_self_overlap(self, b):
        assert iou(b, b) == pytest.approx(1.0, abs=1e-12)

    @given(boxes(max_coord=40, integer=True), boxes(max_coord=40, integer=True))
    def test_matches_raster_oracle(self, a, b):
        assert iou(a, b) == pytest.approx(raster_iou(a.as_tuple(), b.as_tuple()), abs=1e-3)

    @given(st.lists(boxes(), min_size=1, max_size=5), st.lists(boxes(), min_size=1, max_size=5))
    def test_matrix_agrees_with_scalar(self, xs, ys):
        m = iou_matrix(np.array([b.as_tuple() for b in xs]), np.array([b.as_tuple() for b in ys]))
        for i, a in enumerate(xs):
            for j, b in enumerate(ys):
                assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


class TestAspectRatio:
    def test_a_lines_reference_box(self):
        b = BoundingBox(49, 149, 168, 180)
        assert exact_aspect_ratio(b) == Fraction(31, 119)
        assert aspect_ratio(b) == pytest.approx(31 / 119)

    def test_thick_pleura_reference_box(self):
        assert exact_aspect_ratio(BoundingBox(416, 94, 484, 121)) == Fraction(27, 68)

    def test_square(self):
        assert aspect_ratio(BoundingBox(5, 5, 9, 9)) == 1.0


class TestNMS:
    def test_empty(self):
        assert nms([], 0.8, 0.2) == []

    def test_singleton_kept(self):
        d = det((0, 0, 10, 10), score=0.9)
        assert nms([d], 0.8, 0.2) == [d]

    def test_duplicate_suppressed(self):
        hi = det((0, 0, 10, 10), score=0.95)
        lo = det((0, 0, 10, 10), score=0.85)
        assert nms([lo, hi], 0.8, 0.2) == [hi]

    def test_score_threshold_is_inclusive(self):
        d = det((0, 0, 10, 10), score=0.8)
        assert nms([d], 0.8, 0.2) == [d]
        assert nms([det((0, 0, 10, 10), score=0.79)], 0.8, 0.2) == []

    def test_suppression_is_strict(self):
        # IoU exactly 0.5: kept at threshold 0.5, suppressed below it
        a = det((0, 0, 4, 2), score=0.9)
        b = det((0, 0, 2, 2), score=0.8)
        assert iou(a.box, b.box) == 0.5
        assert nms([a, b], 0.0, 0.5) == [a, b]
        assert nms([a, b], 0.0, 0.49) == [a]

    def test_equal_scores_keep_input_order(self):
        a = det((0, 0, 10, 10), score=0.9)
        b = det((1, 1, 10, 10), score=0.9)
        assert nms([a, b], 0.0, 0.2) == [a]
        assert nms([b, a], 0.0, 0.2) == [b]

    def test_classes_do_not_suppress_each_other(self):
        a = det((0, 0, 10, 10), F.ThickPleura, 0.9)
        b = det((0, 0, 10, 10), F.IrregularPleura, 0.8)
        assert nms([a, b], 0.0, 0.1) == [a, b]

    @pytest.mark.parametrize("bad", [(-0.1, 0.2), (0.5, 1.5)])
    def test_rejects_bad_thresholds(self, bad):
        with pytest.raises(ValueError):
            nms([], *bad)

    @given(st.lists(detections(), max_size=12), st.sampled_from([0.0, 0.5, 0.8]), st.sampled_from([0.1, 0.2, 0.5]))
    def test_properties(self, dets, score_thresh, nms_iou):
        out = nms(dets, score_thresh, nms_iou)
        assert all(any(o is d for d in dets) for o in out)
        assert all(o.score >= score_thresh for o in out)
        assert [o.score for o in out] == sorted((o.score for o in out), reverse=True)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                if a.cls is b.cls:
                    assert iou(a.box, b.box) <= nms_iou
        assert nms(out, score_thresh, nms_iou) == out

    @given(st.lists(detections(classes=[F.ALines]), max_size=8), st.lists(detections(classes=[F.Consolidation]), max_size=8))
    def test_per_class_independence(self, xs, ys):
        both = nms(xs + ys, 0.0, 0.2)
        assert [d for d in both if d.cls is F.ALines] == nms(xs, 0.0, 0.2)
        assert [d for d in both if d.cls is F.Consolidation] == nms(ys, 0.0, 0.2)


def test_detection_score_range():
    with pytest.raises(ValueError):
        Detection(BoundingBox(0, 0, 1, 1), F.ALines, 1.3)


def test_feature_class_parse_is_exact():
    assert FeatureClass.parse("ALines") is F.ALines
    for bad in ("alines", "A-lines", "Pneumothorax"):
        with pytest.raises(ValueError):
            FeatureClass.parse(bad)
