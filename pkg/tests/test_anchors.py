import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from luskit.anchors import (
    BACKGROUND,
    PRESETS,
    REFERENCE_RATIOS,
    AnchorConfig,
    BoxOffsets,
    anchors_per_position,
    decode_offsets,
    encode_offsets,
    generate_anchors,
    in_image,
    label_anchors,
    potential_anchor_count,
    preset,
)
from luskit.geometry import BoundingBox, FeatureClass, area, aspect_ratio, iou
from strategies import boxes

F = FeatureClass


def cfg(scales=(32,), ratios=(1,), w=1, h=1, d=1, stride=16.0):
    return AnchorConfig(tuple(scales), tuple(ratios), w, h, d, stride)


class TestCounting:
    def test_frcnn_per_position(self):
        assert anchors_per_position(preset("paper-frcnn")) == 48

    def test_retinanet_per_position(self):
        assert anchors_per_position(preset("paper-retinanet")) == 36

    @pytest.mark.parametrize("n_scales, n_ratios, k", [(1, 1, 1), (3, 3, 9), (4, 12, 48)])
    def test_per_position(self, n_scales, n_ratios, k):
        c = cfg(scales=range(1, n_scales + 1), ratios=range(1, n_ratios + 1))
        assert anchors_per_position(c) == k

    @pytest.mark.parametrize(
        "fmap, expected",
        [((467, 300, 1), 6_724_800), ((7, 7, 1), 2352)],
    )
    def test_potential_frcnn(self, fmap, expected):
        assert potential_anchor_count(preset("paper-frcnn").with_feature_map(*fmap)) == expected

    def test_identity(self):
        assert potential_anchor_count(cfg()) == 1

    def test_depth_multiplies(self):
        assert potential_anchor_count(cfg(w=2, h=3, d=4)) == 24


class TestConfig:
    def test_ratios_are_exact_rationals(self):
        assert PRESETS["paper-frcnn"].ratios[0] == Fraction(31, 119)
        assert len(REFERENCE_RATIOS) == 12

    def test_string_and_decimal_ratios(self):
        c = cfg(ratios=("31/119", 0.5, 2))
        assert c.ratios == (Fraction(31, 119), Fraction(1, 2), Fraction(2))

    @pytest.mark.parametrize(
        "kwargs",
        [dict(scales=()), dict(ratios=()), dict(scales=(0,)), dict(ratios=(-1,)), dict(w=0), dict(stride=0), dict(stride=-2)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            cfg(**kwargs)

    def test_from_dict_with_preset(self):
        c = AnchorConfig.from_dict({"preset": "paper-frcnn", "feature_map": [467, 300]})
        assert potential_anchor_count(c) == 6_724_800

    def test_round_trip_dict(self):
        c = preset("paper-retinanet").with_feature_map(5, 4, 2)
        assert AnchorConfig.from_dict(c.to_dict()) == c

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            preset("yolo")


class TestGenerate:
    def test_unit_configuration(self):
        grid = generate_anchors(cfg(), 16, 16)
        assert len(grid) == 1
        assert grid[0] == BoundingBox(-8, -8, 24, 24)

    def test_tall_ratio(self):
        b = generate_anchors(cfg(ratios=(4,)), 16, 16)[0]
        assert (b.width, b.height) == (16, 64)
        assert b.center == (8, 8)

    def test_ordering_row_major_then_scale_then_ratio(self):
        grid = generate_anchors(cfg(scales=(8, 16), ratios=(1, 2, 3), w=3, h=2), 48, 32)
        o = grid.origins
        assert [tuple(r) for r in o[:7]] == [
            (0, 0, 0, 0, 0), (0, 0, 0, 0, 1), (0, 0, 0, 0, 2),
            (0, 0, 0, 1, 0), (0, 0, 0, 1, 1), (0, 0, 0, 1, 2),
            (0, 1, 0, 0, 0),
        ]
        # cell (2, 1): row 1 comes after the whole of row 0
        assert tuple(o[6 * 5]) == (0, 2, 1, 0, 0)
        assert grid[6 * 5].center == (40.0, 24.0)

    @pytest.mark.parametrize("w, h, d", [(1, 1, 1), (2, 3, 1), (4, 2, 3), (5, 5, 2)])
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_count_matches_formula(self, name, w, h, d):
        c = preset(name).with_feature_map(w, h, d)
        assert len(generate_anchors(c, 100, 100)) == potential_anchor_count(c)

    def test_large_count_matches_formula(self):
        c = preset("paper-frcnn").with_feature_map(40, 30, 1)
        assert len(generate_anchors(c, 640, 480)) == potential_anchor_count(c) == 57_600

    def test_area_and_ratio_by_construction(self):
        c = preset("paper-frcnn").with_feature_map(2, 2)
        grid = generate_anchors(c, 32, 32)
        for i in range(len(grid)):
            b = grid[i]
            assert area(b) == pytest.approx(grid.scale_of(i) ** 2, rel=1e-9)
            assert aspect_ratio(b) == pytest.approx(float(grid.ratio_of(i)), rel=1e-9)

    def test_unclipped_with_in_image_predicate(self):
        grid = generate_anchors(cfg(scales=(8, 64)), 16, 16)
        assert [in_image(b, 16, 16) for b in grid] == [True, False]
        assert grid.inside_mask().tolist() == [True, False]

    def test_rejects_bad_image(self):
        with pytest.raises(ValueError):
            generate_anchors(cfg(), 0, 10)


class TestLabel:
    gt = [(BoundingBox(0, 0, 10, 10), F.ALines), (BoundingBox(20, 20, 40, 40), F.Consolidation)]

    def test_identical_is_foreground(self):
        labels = label_anchors([BoundingBox(20, 20, 40, 40)], self.gt)
        assert labels.tolist() == [1]

    def test_disjoint_is_background(self):
        assert label_anchors([BoundingBox(100, 100, 110, 110)], self.gt).tolist() == [BACKGROUND]

    def test_exact_half_is_background(self):
        a = BoundingBox(0, 0, 20, 10)  # IoU with gt[0] = 100 / 200
        assert iou(a, self.gt[0][0]) == 0.5
        assert label_anchors([a], self.gt).tolist() == [BACKGROUND]
        assert label_anchors([a], self.gt, fg_threshold=0.49).tolist() == [0]

    def test_threshold_one_only_exact(self):
        anchors = [BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 10.001)]
        assert label_anchors(anchors, self.gt, fg_threshold=1.0).tolist() == [0, BACKGROUND]

    def test_grid_and_empty_gt(self):
        grid = generate_anchors(cfg(w=2, h=2), 32, 32)
        assert (label_anchors(grid, []) == BACKGROUND).all()

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            label_anchors([], self.gt, 0.0)

    @given(st.lists(boxes(max_coord=50, integer=True), min_size=1, max_size=6), st.lists(boxes(max_coord=50, integer=True), min_size=1, max_size=4))
    def test_brute_force(self, anchors, gts):
        labels = label_anchors(anchors, [(g, F.ALines) for g in gts])
        for a, lab in zip(anchors, labels):
            overlaps = [iou(a, g) for g in gts]
            best = max(overlaps)
            if best > 0.5:
                assert lab == overlaps.index(best)
            else:
                assert lab == BACKGROUND


class TestOffsets:
    def test_identity(self):
        b = BoundingBox(3, 4, 30, 17)
        assert encode_offsets(b, b).as_tuple() == (0, 0, 0, 0)

    def test_worked_example(self):
        off = encode_offsets(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 20, 20))
        assert off.tx == pytest.approx(0.5) and off.ty == pytest.approx(0.5)
        assert off.tw == pytest.approx(math.log(2)) and off.th == pytest.approx(math.log(2))

    @given(boxes(), boxes())
    def test_decode_encode_round_trip(self, anchor, gt):
        back = decode_offsets(anchor, encode_offsets(anchor, gt))
        assert np.allclose(back.as_tuple(), gt.as_tuple(), rtol=0, atol=1e-9)

    @given(boxes(), st.tuples(*[st.floats(-3, 3, allow_nan=False)] * 4))
    def test_encode_decode_round_trip(self, anchor, t):
        off = BoxOffsets(*t)
        again = encode_offsets(anchor, decode_offsets(anchor, off))
        assert np.allclose(again.as_tuple(), t, rtol=0, atol=1e-9)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            BoxOffsets(0, 0, math.inf, 0)
