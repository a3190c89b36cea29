"""How many anchors does a two-stage detector consider for one ultrasound frame?

Walks through anchors-per-position, the full count for a feature map, the
aspect ratios the anchor set is built from, and how anchors are labelled
against a ground-truth box.
"""
from fractions import Fraction

from luskit.anchors import REFERENCE_BOXES, anchors_per_position, generate_anchors, label_anchors, potential_anchor_count, preset
from luskit.geometry import BoundingBox, FeatureClass, exact_aspect_ratio

cfg = preset("paper-frcnn")
print(f"scales: {cfg.scales}")
print(f"{len(cfg.ratios)} height:width ratios taken from reference boxes")
print(f"anchors per position k = {anchors_per_position(cfg)}")

big = cfg.with_feature_map(467, 300, 1)
print(f"a 467x300x1 feature map gives {potential_anchor_count(big):,} potential anchors")

print("\nreference boxes and their exact ratios:")
for cls, coords, (num, den) in REFERENCE_BOXES:
    got = exact_aspect_ratio(BoundingBox(*coords))
    flag = "" if got == Fraction(num, den) else f"   (listed {num}/{den})"
    print(f"  {cls.display_name:<20} {str(coords):<22} {got}{flag}")

# label a small grid against one box of roughly anchor size
small = cfg.with_feature_map(8, 8, 1)
grid = generate_anchors(small, 128, 128)
gt = BoundingBox(22, 26, 58, 54)
labels = label_anchors(grid, [(gt, FeatureClass.NormalPleura)])
print(f"\n{len(grid)} anchors on an 8x8 grid; {int((labels >= 0).sum())} labelled foreground for {gt.as_tuple()}")
print(f"{int(grid.inside_mask().sum())} anchors lie fully inside the 128x128 image")
