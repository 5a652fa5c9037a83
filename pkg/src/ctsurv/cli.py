"""Command-line entry point: ``ctsurv <subcommand> ...``.

Every subcommand exits 0 on success. Failures print ``ctsurv <stage>:
<message>`` to stderr and exit 1 (bad input or a failed stage) or 2
(argument errors, from argparse).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from types import SimpleNamespace

import numpy as np

from .dataio import TableSchema, load_feature_table, load_outcomes, load_volume, save_feature_table, save_volume

log = logging.getLogger("ctsurv")


def _write_json(obj, path):
    from .report import dumps

    if path in (None, "-"):
        sys.stdout.write(dumps(obj))
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dumps(obj))


def _table(args, path=None, batch=True):
    schema = TableSchema(
        id_column=args.id_column,
        batch_column=getattr(args, "batch_column", None) if batch else None,
        covariate_columns=tuple(getattr(args, "covariates", None) or ()),
        drop=tuple(getattr(args, "drop", None) or ()),
    )
    return load_feature_table(path or args.features, schema)


def _model_matrix(model, table):
    missing = [f for f in model.feature_names if f not in table.feature_names]
    if missing:
        raise ValueError(f"feature table lacks model features: {missing[:5]}")
    X = table.select_features(model.feature_names).values
    if np.isnan(X).any():
        raise ValueError("missing values in model features; impute first")
    return X


def _aligned(args, features_path=None, outcomes_path=None):
    from .dataio import align_cohort

    table = _table(args, features_path, batch=False)
    outcomes = load_outcomes(outcomes_path or args.outcomes)
    table, outcomes, dropped = align_cohort(table, outcomes)
    if dropped["features"] or dropped["outcomes"]:
        log.warning(
            "dropped %d feature-only and %d outcome-only subjects",
            len(dropped["features"]),
            len(dropped["outcomes"]),
        )
    return table, outcomes


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    from .dataio import save_outcomes
    from .synth import CohortSpec, gen_cohort

    with open(args.spec, encoding="utf-8") as fh:
        d = json.load(fh)
    if args.seed is not None:
        d["seed"] = args.seed
    spec = CohortSpec.from_json(json.dumps(d))
    features, outcomes, truth = gen_cohort(spec)
    if args.out_prefix:
        prefix = args.out_prefix + "_"
    else:
        os.makedirs(args.out, exist_ok=True)
        prefix = os.path.join(args.out, "")
    if os.path.dirname(prefix):
        os.makedirs(os.path.dirname(prefix), exist_ok=True)
    save_feature_table(features, prefix + "features.csv")
    save_outcomes(outcomes, prefix + "outcomes.csv")
    _write_json(
        {
            "beta": truth.beta,
            "censoring_achieved": truth.censoring_achieved,
            "batch_params": truth.batch_params,
            "spec": json.loads(spec.to_json()),
        },
        prefix + "truth.json",
    )


def cmd_rkn(args):
    from .rkn import RknReference, reference_from_image, rkn_normalize

    vol = load_volume(args.volume)
    mask = load_volume(args.mask, mask=True)
    if args.reference_stats:
        with open(args.reference_stats, encoding="utf-8") as fh:
            ref = RknReference.from_json(fh.read())
    elif args.reference_volume and args.reference_mask:
        ref = reference_from_image(load_volume(args.reference_volume), load_volume(args.reference_mask, mask=True))
    else:
        raise ValueError("give --reference-stats or both --reference-volume and --reference-mask")
    if args.save_reference:
        with open(args.save_reference, "w", encoding="utf-8") as fh:
            fh.write(ref.to_json())
    res = rkn_normalize(vol, ref, mask, args.max_iters)
    save_volume(res.volume, args.output, dtype="f32")
    if not res.converged:
        log.warning("not converged after %d iterations", res.iterations)
    _write_json(
        {"iterations": res.iterations, "converged": res.converged, "lambdas": res.lambdas, "reference": ref.band_sds},
        args.report,
    )


def cmd_cac(args):
    from .cac import agatston

    report = agatston(load_volume(args.volume), load_volume(args.mask, mask=True))
    _write_json(report.to_dict(), args.report)


def cmd_combat(args):
    from .combat import CombatModel, HarmonizationConfig, combat_apply, combat_fit, largest_batch

    table = _table(args)
    if args.model_in:
        model = CombatModel.load(args.model_in)
    else:
        fit_table = table
        if args.fit_ids:
            with open(args.fit_ids, encoding="utf-8") as fh:
                ids = [line.strip() for line in fh if line.strip()]
            fit_table = table.subset(ids)
        ref = args.reference_batch or largest_batch(fit_table.batch)
        cfg = HarmonizationConfig(ref, tuple(args.covariates or ()), args.mode, eb=not args.no_eb)
        model = combat_fit(fit_table, cfg)
        if args.model_out:
            model.save(args.model_out)
    save_feature_table(combat_apply(model, table), args.output, batch_column=args.batch_column)


def cmd_select(args):
    from .featsel import impute, stability_select

    table, outcomes = _aligned(args)
    if table.n_missing:
        table, _ = impute(table, args.impute)
    rep = stability_select(table, outcomes, args.corr_threshold, args.folds, args.seed, args.variance_tol)
    _write_json(rep.to_dict(), args.report)
    if args.output:
        save_feature_table(table.select_features(rep.retained), args.output)


def cmd_fit(args):
    from .cox import cox_fit

    table, outcomes = _aligned(args)
    if table.n_missing:
        raise ValueError("missing values present; impute first (ctsurv select does this)")
    model = cox_fit(table.values, outcomes, args.penalty, args.l1_ratio, table.feature_names)
    if not model.converged:
        log.warning("Cox fit hit the iteration cap")
    model.save(args.model_out)


def cmd_tune(args):
    from .cox import SearchSpace, cox_fit, tune

    table, outcomes = _aligned(args)
    space = SearchSpace(
        tuple(args.penalty_range), tuple(args.l1_ratio_range), tuple(args.pca_k) if args.pca_k else None
    )
    res = tune(table.values, outcomes, space, args.trials, args.folds, args.seed)
    _write_json(res.to_dict(), args.report)
    if args.model_out:
        if res.best.get("pca_k"):
            raise ValueError("--model-out is only supported without PCA")
        cox_fit(table.values, outcomes, res.best["penalty"], res.best["l1_ratio"], table.feature_names).save(
            args.model_out
        )


def cmd_evaluate(args):
    from .cox import CoxModel
    from .pipeline import _discrimination, _risk_group_block
    from .report import emit_report, skeleton

    test_table, test_out = _aligned(args)
    train_table, train_out = _aligned(args, args.train_features, args.train_outcomes)
    cfg = SimpleNamespace(bootstrap=args.bootstrap, seed=args.seed, horizons=tuple(args.horizon_months))
    metrics = skeleton(args.seed, cfg.horizons)
    metrics["n_train"], metrics["n_test"] = len(train_out), len(test_out)
    km = {}
    for path in args.models:
        model = CoxModel.load(path)
        r_te = model.partial_hazard(_model_matrix(model, test_table))
        r_tr = model.partial_hazard(_model_matrix(model, train_table))
        entry = {
            "kind": "cox",
            "features": list(model.feature_names),
            "params": {"penalty": model.penalty, "l1_ratio": model.l1_ratio},
        }
        entry.update(_discrimination(cfg, train_out, test_out, r_tr, r_te))
        name = os.path.splitext(os.path.basename(path))[0]
        groups, km[name] = _risk_group_block(r_tr, r_te, test_out.time_months, test_out.event)
        entry.update(groups)
        metrics["models"][name] = entry
    emit_report({"metrics": metrics, "km": km}, args.out)


def cmd_explain(args):
    from .cox import CoxModel
    from .explain import shap_linear, shap_summary

    model = CoxModel.load(args.model)
    table = _table(args, batch=False)
    attr = shap_linear(model, _model_matrix(model, table))
    rows = shap_summary(attr, args.top_k)
    if args.phi_out:
        import pandas as pd

        df = pd.DataFrame(attr.values, columns=list(attr.feature_names))
        df.insert(0, "id", list(table.subject_ids))
        df["base_value"] = attr.base_value
        df.to_csv(args.phi_out, index=False, float_format="%.17g")
    if args.summary_out:
        import pandas as pd

        pd.DataFrame(
            [(r["feature"], r["mean_abs"], r["direction"]) for r in rows],
            columns=["feature", "mean_abs_phi", "direction"],
        ).to_csv(args.summary_out, index=False, float_format="%.17g")
    _write_json(
        {
            "scale": attr.scale,
            "base_value": attr.base_value,
            "summary": [{k: v for k, v in r.items() if k != "values"} for r in rows],
        },
        args.report,
    )


def cmd_consensus(args):
    from .consensus import build_consensus
    from .cox import CoxModel

    if len(args.models) < 2:
        raise ValueError("need at least 2 --models")
    test_feats = args.features_per_model or [args.features] * len(args.models)
    train_feats = args.train_features_per_model or [args.train_features] * len(args.models)
    if len(test_feats) != len(args.models) or len(train_feats) != len(args.models):
        raise ValueError("one feature table per model is required")
    names, s_tr, s_te = [], [], []
    test_out = train_out = None
    for mpath, fte, ftr in zip(args.models, test_feats, train_feats):
        model = CoxModel.load(mpath)
        tte, out_te = _aligned(args, fte, args.outcomes)
        ttr, out_tr = _aligned(args, ftr, args.train_outcomes)
        if test_out is not None and out_te.subject_ids != test_out.subject_ids:
            raise ValueError("models see different test subjects")
        test_out, train_out = out_te, out_tr
        names.append(os.path.splitext(os.path.basename(mpath))[0])
        s_te.append(model.survival_function(_model_matrix(model, tte), args.horizon))
        s_tr.append(model.survival_function(_model_matrix(model, ttr), args.horizon))
    rep = build_consensus(
        names,
        s_tr,
        s_te,
        train_out.time_months,
        train_out.event,
        test_out.time_months,
        test_out.event,
        args.horizon,
        test_out.subject_ids,
    )
    _write_json(rep.to_dict(), args.report)


def cmd_run(args):
    from .pipeline import PipelineConfig, run_pipeline

    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or cfg.path(cfg.output_dir)
    res = run_pipeline(cfg, out)
    print(f"wrote report to {res['output_dir']}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_table_args(p, outcomes=True):
    p.add_argument("--features", required=True, help="feature CSV")
    p.add_argument("--id-column", default="id")
    p.add_argument("--drop", nargs="*", help="non-feature columns to ignore")
    if outcomes:
        p.add_argument("--outcomes", required=True, help="CSV with id,time_months,event")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctsurv", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--spec", required=True, help="cohort spec JSON")
    p.add_argument("--seed", type=int)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--out", help="output directory (features.csv, outcomes.csv, truth.json)")
    g.add_argument("--out-prefix", help="write <prefix>_features.csv, <prefix>_outcomes.csv, <prefix>_truth.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rkn", help="reconstruction kernel normalization of a volume")
    p.add_argument("--input", "--volume", dest="volume", required=True, help="volume header JSON")
    p.add_argument("--mask", required=True)
    p.add_argument("--reference-stats", help="JSON with band_sds")
    p.add_argument("--reference-volume")
    p.add_argument("--reference-mask")
    p.add_argument("--save-reference", help="write the reference band SDs here")
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--output", required=True, help="normalized volume header path")
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_rkn)

    p = sub.add_parser("cac", help="Agatston calcium score")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True, help="artery mask")
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_cac)

    p = sub.add_parser("combat", help="reference-batch ComBat harmonization")
    _add_table_args(p, outcomes=False)
    p.add_argument("--batch-column", required=True)
    p.add_argument("--reference-batch", help="default: largest batch")
    p.add_argument("--covariates", nargs="*")
    p.add_argument("--mode", choices=("pooled", "train-only"), default="pooled")
    p.add_argument("--fit-ids", help="file with one subject ID per line to fit on (train-only)")
    p.add_argument("--no-eb", action="store_true", help="skip empirical Bayes shrinkage")
    p.add_argument("--model-in", help="apply a saved model instead of fitting")
    p.add_argument("--model-out")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_combat)

    p = sub.add_parser("select", help="stability feature selection")
    _add_table_args(p)
    p.add_argument("--corr-threshold", type=float, default=0.90)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variance-tol", type=float, default=1e-8)
    p.add_argument("--impute", default="median", choices=("median", "mode"))
    p.add_argument("--report", default="-")
    p.add_argument("--output", help="write the imputed, selected feature table")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("fit", help="fit an elastic-net Cox model")
    _add_table_args(p)
    p.add_argument("--penalty", type=float, default=0.0)
    p.add_argument("--l1-ratio", type=float, default=0.0)
    p.add_argument("--model-out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune", help="random-search hyperparameter tuning")
    _add_table_args(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--penalty-range", type=float, nargs=2, default=(1e-4, 10.0))
    p.add_argument("--l1-ratio-range", type=float, nargs=2, default=(0.0, 1.0))
    p.add_argument("--pca-k", type=int, nargs="*")
    p.add_argument("--report", default="-")
    p.add_argument("--model-out", help="refit the best configuration on all rows")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("evaluate", help="C-index, t-AUC, KM and HR of fitted models")
    p.add_argument("--models", "--model", dest="models", nargs="+", required=True)
    _add_table_args(p)
    p.add_argument("--train-features", required=True, help="training features (median split, IPCW)")
    p.add_argument("--train-outcomes", required=True)
    p.add_argument("--horizon-months", type=float, nargs="+", default=[60.0])
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="SHAP attributions of a fitted model")
    p.add_argument("--model", required=True)
    _add_table_args(p, outcomes=False)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--phi-out", help="per-subject attribution CSV")
    p.add_argument("--summary-out", help="summary CSV: feature, mean |phi|, direction")
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("consensus", help="strict multi-model consensus at a horizon")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--features", help="test features shared by all models")
    p.add_argument("--features-per-model", nargs="+")
    p.add_argument("--train-features")
    p.add_argument("--train-features-per-model", nargs="+")
    p.add_argument("--id-column", default="id")
    p.add_argument("--drop", nargs="*", help="non-feature columns to ignore")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--train-outcomes", required=True)
    p.add_argument("--horizon-months", type=float, default=60.0, dest="horizon")
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    from .pipeline import PipelineError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"ctsurv run: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"ctsurv {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
