"""Recomputing the overall mAP row of a reported per-class AP table.

The overall figure is the plain mean of the seven class APs at each IoU.
"""
from luskit.evaluation import aggregate_per_class_table, read_per_class_table

for name in ("table3-frcnn", "table3-retinanet"):
    table = read_per_class_table(f"builtin:{name}")
    totals = aggregate_per_class_table(table)
    print(name)
    for label, rows in table.items():
        values = ", ".join(f"{v:g}" for v in rows.values())
        print(f"  {label:>5}: mean({values}) = {totals[label]:.4f} -> {totals[label]:.2f}")
