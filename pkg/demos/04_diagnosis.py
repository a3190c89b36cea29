"""From frame detections to a ranked list of candidate conditions.

Detections are collapsed into scan-level feature presence, then every
condition is scored by how many of its feature groups are present. Age
moves conditions in or out of the compatible tier without changing scores.
"""
from luskit.annotations import ConditionClass
from luskit.diagnosis import aggregate_scan, annotate_frame_report, rank_conditions
from luskit.synthetic import PerturbationConfig, ScenarioProfile, generate_ground_truth, perturb

gt = generate_ground_truth(ScenarioProfile(ConditionClass.RDS, 60), seed=21)
preds = perturb(gt, PerturbationConfig(jitter_sigma=2.0, drop_rate=0.1, spurious_rate=0.05, score_mean_tp=0.92, seed=5))
summary = aggregate_scan([(f.frame_index, f.detections()) for f in preds], total_frames=len(gt))
print("present:", ", ".join(sorted(c.display_name for c in summary.present_features)))

for age in (6, 72):
    print(f"\npatient age {age} h")
    for rank, cand in enumerate(rank_conditions(summary, age_hours=age), 1):
        tier = "" if cand.age_compatible else " [age-incompatible]"
        print(f"  {rank}. {cand.condition.value:<6} {cand.match_score:.2f}{tier}")
        print(f"     {cand.rationale}")

first = preds.frames[0]
report = annotate_frame_report(first.key, first.detections(), rank_conditions(summary, age_hours=6))
print(f"\nSVG overlay for frame {first.key}: {len(report.to_svg().splitlines())} lines, "
      f"{len(report.detections)} boxes")
