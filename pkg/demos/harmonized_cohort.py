"""Synthetic two-centre cohort, fitted with and without ComBat.

Generates a cohort whose second centre shifts and rescales every feature,
runs the full pipeline twice (harmonization off and on) and prints the
held-out C-index of each run next to the audit of fitted objects.

    python3 demos/harmonized_cohort.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from ctsurv.dataio import save_feature_table, save_outcomes
from ctsurv.pipeline import PipelineConfig, leakage_violations, run_pipeline
from ctsurv.synth import BatchEffect, CohortSpec, gen_cohort

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="ctsurv_demo_"))
work.mkdir(parents=True, exist_ok=True)

spec = CohortSpec(
    400,
    beta=(1.0, -0.5),
    n_noise=2,
    censoring_rate=0.3,
    batches=(BatchEffect(0.5, name="A"), BatchEffect(0.5, shift=1.5, scale=2.0, name="B")),
    seed=100,
)
features, outcomes, truth = gen_cohort(spec)
save_feature_table(features, work / "features.csv", batch_column="site")
save_outcomes(outcomes, work / "outcomes.csv")
print(f"cohort: {len(outcomes.subject_ids)} subjects, censoring {truth.censoring_achieved:.2f}, in {work}")

for harmonization in ("none", "combat"):
    cfg = PipelineConfig.from_dict(
        {
            "outcomes": "outcomes.csv",
            "rois": {"r": {"features": "features.csv", "batch_column": "site",
                           "harmonization": harmonization, "combat_mode": "train-only"}},
            "models": [{"name": "m", "rois": ["r"]}],
            "n_trials": 10,
            "bootstrap": 100,
            "horizons": [24],
            "seed": 0,
        },
        base_dir=str(work),
    )
    res = run_pipeline(cfg, str(work / f"report_{harmonization}"))
    c = res["metrics"]["models"]["m"]["c_index"]["test"]
    bad = leakage_violations(res["audit"], res["manifest"]["split"]["test_ids"])
    print(f"{harmonization:>6}: test C-index {c['estimate']:.3f} "
          f"[{c['ci_low']:.3f}, {c['ci_high']:.3f}], {len(res['audit'])} fitted objects, "
          f"{len(bad)} fitted on test subjects")
