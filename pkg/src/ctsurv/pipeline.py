"""Config-driven end-to-end runs.

A run goes ingest -> optional RKN on volumes -> per-ROI impute and
harmonize -> per-model select, tune, fit, evaluate, explain -> ensembles
and consensus -> report files plus a manifest. Every statistic that is
learned from data is fitted on the training split only and recorded in an
audit log together with the IDs it was fitted on; pooled ComBat is the one
deliberate exception and is flagged as transductive.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .combat import HarmonizationConfig, combat_apply, combat_fit, largest_batch
from .consensus import build_consensus, ensemble_risk, valid_at_horizon
from .cox import SearchSpace, cox_fit, tune
from .dataio import (
    FeatureTable,
    OutcomeTable,
    TableSchema,
    load_feature_table,
    load_outcomes,
    load_volume,
    save_volume,
)
from .explain import shap_linear, shap_summary
from .featsel import Imputer, pca_fit, pca_transform, stability_select
from .metrics import bootstrap, concordance, cumulative_dynamic_auc, hazard_ratio, km_curve, log_rank
from .report import dumps, emit_report, skeleton, write_json
from .rkn import RknReference, reference_from_image, rkn_normalize

log = logging.getLogger(__name__)

HARMONIZATION = ("none", "combat", "rkn", "rkn+combat")
ROI_ONLY_THRESHOLD = 0.90
COMBINED_THRESHOLD = 0.70


class PipelineError(RuntimeError):
    """Stage-tagged failure; ``manifest`` holds what was done before it."""

    def __init__(self, stage, message, manifest=None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.manifest = manifest


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class RoiConfig:
    features: str
    id_column: str = "id"
    batch_column: str | None = None
    covariate_columns: tuple[str, ...] = ()
    drop: tuple[str, ...] = ()
    harmonization: str = "none"
    combat_reference: str | None = None  # default: largest training batch
    combat_mode: str = "pooled"  # transductive; "train-only" for leakage-free runs
    combat_covariates: tuple[str, ...] = ()
    impute_default: str = "median"
    impute_strategies: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.harmonization not in HARMONIZATION:
            raise ValueError(f"harmonization must be one of {HARMONIZATION}, got {self.harmonization!r}")
        if "combat" in self.harmonization and self.batch_column is None:
            raise ValueError("ComBat harmonization needs a batch_column")
        self.covariate_columns = tuple(self.covariate_columns)
        self.combat_covariates = tuple(self.combat_covariates)
        self.drop = tuple(self.drop)


@dataclass
class ModelConfig:
    name: str
    rois: tuple[str, ...]
    corr_threshold: float | None = None  # default by ROI count
    pca_k: tuple[int, ...] | None = None

    def __post_init__(self):
        self.rois = tuple(self.rois)
        if not self.rois:
            raise ValueError(f"model {self.name!r} uses no ROI")
        if self.corr_threshold is None:
            self.corr_threshold = ROI_ONLY_THRESHOLD if len(self.rois) == 1 else COMBINED_THRESHOLD
        if not 0 < self.corr_threshold <= 1:
            raise ValueError("corr_threshold must be in (0, 1]")
        if self.pca_k is not None:
            self.pca_k = tuple(int(k) for k in self.pca_k)


@dataclass
class PipelineConfig:
    """Everything a run needs; relative paths resolve against ``base_dir``."""

    outcomes: str
    rois: dict
    models: list
    output_dir: str = "out"
    seed: int = 0
    test_fraction: float = 0.3
    test_ids: list | None = None
    horizons: tuple[float, ...] = (60.0, 24.0)
    bootstrap: int = 1000
    n_trials: int = 100
    n_folds: int = 5
    penalty_range: tuple[float, float] = (1e-4, 10.0)
    l1_ratio_range: tuple[float, float] = (0.0, 1.0)
    selection_folds: int = 5
    variance_tol: float = 1e-8
    shap_top_k: int = 20
    ensembles: list = field(default_factory=list)
    consensus: dict | None = None
    rkn: dict | None = None
    base_dir: str = "."

    def __post_init__(self):
        self.rois = {k: v if isinstance(v, RoiConfig) else RoiConfig(**v) for k, v in self.rois.items()}
        self.models = [m if isinstance(m, ModelConfig) else ModelConfig(**m) for m in self.models]
        names = [m.name for m in self.models] + [e["name"] for e in self.ensembles]
        if len(set(names)) != len(names):
            raise ValueError("model and ensemble names must be unique")
        for m in self.models:
            missing = set(m.rois) - set(self.rois)
            if missing:
                raise ValueError(f"model {m.name!r} refers to unknown ROIs {sorted(missing)}")
        known = {m.name for m in self.models}
        for e in self.ensembles:
            if len(e["models"]) < 2 or not set(e["models"]) <= known:
                raise ValueError(f"ensemble {e['name']!r} needs >= 2 known models")
        if self.consensus is not None:
            if len(self.consensus["models"]) < 2 or not set(self.consensus["models"]) <= known:
                raise ValueError("consensus needs >= 2 known models")
        if self.test_ids is None and not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")
        self.horizons = tuple(float(h) for h in self.horizons)
        if any(h <= 0 for h in self.horizons):
            raise ValueError("horizons must be > 0")
        self.penalty_range = tuple(self.penalty_range)
        self.l1_ratio_range = tuple(self.l1_ratio_range)

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        d.setdefault("base_dir", base_dir)
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))

    def path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def to_dict(self):
        """Plain representation for the manifest (``base_dir`` left out)."""
        out = {}
        for k, v in self.__dict__.items():
            if k == "base_dir":
                continue
            if k == "rois":
                v = {name: dict(r.__dict__) for name, r in sorted(v.items())}
            elif k == "models":
                v = [dict(m.__dict__) for m in v]
            out[k] = v
        return json.loads(json.dumps(out))


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def split_ids(ids, event, test_fraction, seed):
    """Stratified on the event indicator; returns ``(train_ids, test_ids)`` in input order."""
    rng = np.random.default_rng(seed)
    event = np.asarray(event).astype(int)
    is_test = np.zeros(len(ids), bool)
    for stratum in (0, 1):
        idx = rng.permutation(np.flatnonzero(event == stratum))
        is_test[idx[: int(round(test_fraction * idx.size))]] = True
    return [s for s, t in zip(ids, is_test) if not t], [s for s, t in zip(ids, is_test) if t]


class _Audit:
    def __init__(self):
        self.entries = []

    def add(self, name, stage, fit_ids, transductive=False):
        self.entries.append(
            {"object": name, "stage": stage, "fit_ids": sorted(fit_ids), "transductive": bool(transductive)}
        )


def leakage_violations(audit_entries, test_ids):
    """Names of non-transductive fitted objects whose fitting subset touches ``test_ids``."""
    test = set(test_ids)
    return [e["object"] for e in audit_entries if not e["transductive"] and test & set(e["fit_ids"])]


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ValueError as exc:
        log.warning("%s skipped: %s", getattr(fn, "__name__", fn), exc)
        return None


def _hkey(h):
    return f"{h:g}"


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _stage_rkn(cfg: PipelineConfig, out_dir, manifest):
    block = cfg.rkn
    ref = block["reference"]
    if "band_sds" in ref:
        reference = RknReference(tuple(ref["band_sds"]))
    else:
        reference = reference_from_image(
            load_volume(cfg.path(ref["volume"])), load_volume(cfg.path(ref["mask"]), mask=True)
        )
    os.makedirs(os.path.join(out_dir, "rkn"), exist_ok=True)
    done = {}
    for item in block.get("subjects", []):
        vol = load_volume(cfg.path(item["volume"]))
        mask = load_volume(cfg.path(item["mask"]), mask=True)
        res = rkn_normalize(vol, reference, mask, int(block.get("max_iters", 10)))
        path = os.path.join(out_dir, "rkn", f"{item['id']}.json")
        save_volume(res.volume, path, dtype="f32")
        done[item["id"]] = {
            "iterations": res.iterations,
            "converged": res.converged,
            "lambdas": res.lambdas.tolist(),
        }
    manifest["rkn"] = {"reference_band_sds": list(reference.band_sds), "subjects": done}


def _prepare_roi(name, roi: RoiConfig, table: FeatureTable, train_ids, test_ids, audit, manifest):
    """Impute then (optionally) ComBat one ROI table; returns ``(train, test)`` tables."""
    tr, te = table.subset(train_ids), table.subset(test_ids)
    imp = Imputer.fit(tr, strategies=roi.impute_strategies, default=roi.impute_default)
    audit.add(f"imputer:{name}", "impute", train_ids)
    tr, te = imp.apply(tr), imp.apply(te)
    info = {"harmonization": roi.harmonization, "n_features": table.n_features}
    if "combat" in roi.harmonization:
        ref = roi.combat_reference or largest_batch(tr.batch)
        hc = HarmonizationConfig(ref, roi.combat_covariates, roi.combat_mode)
        if roi.combat_mode == "pooled":
            both = FeatureTable(
                tr.subject_ids + te.subject_ids,
                tr.feature_names,
                np.vstack([tr.values, te.values]),
                tr.batch + te.batch,
                {k: np.concatenate([tr.covariates[k], te.covariates[k]]) for k in tr.covariates},
            )
            model = combat_fit(both, hc)
            audit.add(f"combat:{name}", "harmonize", list(train_ids) + list(test_ids), transductive=True)
        else:
            model = combat_fit(tr, hc)
            audit.add(f"combat:{name}", "harmonize", train_ids)
        tr, te = combat_apply(model, tr), combat_apply(model, te)
        info.update({"combat_reference": ref, "combat_mode": roi.combat_mode, "batches": list(model.batches)})
    manifest["rois"][name] = info
    return tr, te


def _concat(tables, names):
    """Column-bind ROI tables, prefixing feature names with the ROI name."""
    ids = tables[0].subject_ids
    cols = [f"{roi}:{f}" for roi, t in zip(names, tables) for f in t.feature_names]
    return ids, cols, np.hstack([t.values for t in tables])


def _risk_group_block(train_risk, test_risk, test_t, test_e):
    thr = float(np.median(train_risk))
    high = test_risk > thr
    out = {
        "risk_groups": {"threshold": thr, "n_high": int(high.sum()), "n_low": int((~high).sum())},
        "log_rank": None,
        "hazard_ratio": None,
    }
    km = []
    for label, sel in (("high", high), ("low", ~high)):
        if sel.any():
            km += km_curve(test_t[sel], test_e[sel]).rows(label)
    if high.any() and (~high).any() and test_e.sum() > 0:
        chi2, p = log_rank(test_t[high], test_e[high], test_t[~high], test_e[~high])
        out["log_rank"] = {"chi2": chi2, "p": p}
        hr = _safe(hazard_ratio, test_t, test_e, high.astype(int))
        out["hazard_ratio"] = hr.to_dict() if hr is not None else None
    return out, km


def _discrimination(cfg, train_out, test_out, train_risk, test_risk):
    tt, te = test_out.time_months, test_out.event
    btr_t, btr_e = train_out.time_months, train_out.event
    cidx = _safe(
        bootstrap, concordance, (tt, te, test_risk), n=cfg.bootstrap, seed=cfg.seed
    )
    tauc = {}
    for h in cfg.horizons:

        def metric(t, e, r, h=h):
            return cumulative_dynamic_auc(btr_t, btr_e, t, e, r, h)

        s = _safe(bootstrap, metric, (tt, te, test_risk), n=cfg.bootstrap, seed=cfg.seed)
        tauc[_hkey(h)] = s.to_dict() if s is not None else None
    return {
        "c_index": {
            "train": _safe(concordance, btr_t, btr_e, train_risk),
            "test": cidx.to_dict() if cidx is not None else None,
        },
        "t_auc": tauc,
    }


def _fit_model(cfg, m: ModelConfig, prepared, train_out, test_out, audit, out_dir):
    tables_tr = [prepared[r][0] for r in m.rois]
    tables_te = [prepared[r][1] for r in m.rois]
    ids_tr, cols, Xtr = _concat(tables_tr, m.rois)
    ids_te, _, Xte = _concat(tables_te, m.rois)

    # selection
    sel = stability_select(
        FeatureTable(ids_tr, cols, Xtr),
        train_out,
        m.corr_threshold,
        cfg.selection_folds,
        cfg.seed,
        cfg.variance_tol,
    )
    audit.add(f"selection:{m.name}", "select", ids_tr)
    write_json(sel.to_dict(), os.path.join(out_dir, f"selection_{m.name}.json"))
    if not sel.retained:
        raise ValueError(f"model {m.name!r}: no feature survived selection")
    keep = [cols.index(c) for c in sel.retained]
    Xtr, Xte = Xtr[:, keep], Xte[:, keep]

    # standardize on training rows so the penalty treats features alike
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd[sd == 0] = 1.0
    audit.add(f"scaler:{m.name}", "fit", ids_tr)
    Ztr, Zte = (Xtr - mu) / sd, (Xte - mu) / sd

    # tuning
    space = SearchSpace(cfg.penalty_range, cfg.l1_ratio_range, m.pca_k)
    tr_res = tune(Ztr, train_out, space, cfg.n_trials, cfg.n_folds, cfg.seed)
    audit.add(f"tuning:{m.name}", "tune", ids_tr)
    write_json(tr_res.to_dict(), os.path.join(out_dir, f"tuning_{m.name}.json"))
    params = dict(tr_res.best)

    names = list(sel.retained)
    if params.get("pca_k"):
        k = min(params["pca_k"], Ztr.shape[0] - 1, Ztr.shape[1])
        pca = pca_fit(Ztr, k)
        audit.add(f"pca:{m.name}", "fit", ids_tr)
        Ztr, Zte = pca_transform(pca, Ztr), pca_transform(pca, Zte)
        names = [f"pc{j + 1}" for j in range(k)]
        params["pca_k"] = k
    model = cox_fit(Ztr, train_out, params["penalty"], params["l1_ratio"], names)
    audit.add(f"cox:{m.name}", "fit", ids_tr)
    model.save(os.path.join(out_dir, f"model_{m.name}.json"))

    r_tr, r_te = model.partial_hazard(Ztr), model.partial_hazard(Zte)
    entry = {
        "kind": "cox",
        "rois": list(m.rois),
        "features": list(sel.retained),
        "n_features": len(sel.retained),
        "corr_threshold": m.corr_threshold,
        "params": params,
        "cv_cindex": tr_res.best_score,
        "beta": model.beta.tolist(),
        "converged": model.converged,
    }
    entry.update(_discrimination(cfg, train_out, test_out, r_tr, r_te))
    groups, km = _risk_group_block(r_tr, r_te, test_out.time_months, test_out.event)
    audit.add(f"median_threshold:{m.name}", "evaluate", ids_tr)
    entry.update(groups)

    attr = shap_linear(model, Zte)
    audit.add(f"shap_background:{m.name}", "explain", ids_tr)
    summary = shap_summary(attr, cfg.shap_top_k)
    shap_rows = [(r["feature"], r["mean_abs"], r["direction"]) for r in summary]

    surv = {
        _hkey(h): (model.survival_function(Ztr, h), model.survival_function(Zte, h)) for h in cfg.horizons
    }
    return entry, km, shap_rows, (r_tr, r_te), surv


def run_pipeline(config: PipelineConfig, output_dir=None) -> dict:
    """Execute a full run and write report files, audit log and manifest.

    Returns a dict with ``metrics``, ``km``, ``shap``, ``consensus``,
    ``audit`` and ``manifest``. Any failure raises :class:`PipelineError`
    naming the stage, after writing a partial manifest.
    """
    cfg = config
    out_dir = output_dir or cfg.path(cfg.output_dir)
    manifest = {
        "package_version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "stages": [],
        "status": "running",
        "inputs": {},
        "rois": {},
    }
    audit = _Audit()
    stage = "setup"

    def done(name):
        manifest["stages"].append(name)

    try:
        os.makedirs(out_dir, exist_ok=True)

        stage = "ingest"
        out_path = cfg.path(cfg.outcomes)
        outcomes = load_outcomes(out_path)
        manifest["inputs"][cfg.outcomes] = sha256_file(out_path)
        raw = {}
        for name, roi in sorted(cfg.rois.items()):
            p = cfg.path(roi.features)
            schema = TableSchema(roi.id_column, roi.batch_column, roi.covariate_columns, roi.drop)
            raw[name] = load_feature_table(p, schema)
            manifest["inputs"][roi.features] = sha256_file(p)
        # cohort = subjects present in the outcomes and every ROI table
        common = set(outcomes.subject_ids)
        for t in raw.values():
            common &= set(t.subject_ids)
        ids = [s for s in outcomes.subject_ids if s in common]
        if len(ids) < 10:
            raise ValueError(f"only {len(ids)} subjects shared by all inputs")
        manifest["dropped_ids"] = sorted(set(outcomes.subject_ids) - common)
        outcomes = outcomes.subset(ids)
        done(stage)

        if cfg.rkn:
            stage = "rkn"
            _stage_rkn(cfg, out_dir, manifest)
            done(stage)

        stage = "split"
        if cfg.test_ids is not None:
            test_set = {str(s) for s in cfg.test_ids}
            train_ids = [s for s in ids if s not in test_set]
            test_ids = [s for s in ids if s in test_set]
        else:
            train_ids, test_ids = split_ids(ids, outcomes.event, cfg.test_fraction, cfg.seed)
        if not test_ids or not train_ids:
            raise ValueError("empty train or test split")
        train_out, test_out = outcomes.subset(train_ids), outcomes.subset(test_ids)
        manifest["split"] = {"n_train": len(train_ids), "n_test": len(test_ids), "test_ids": test_ids}
        done(stage)

        stage = "harmonize"
        used = sorted({r for m in cfg.models for r in m.rois})
        prepared = {r: _prepare_roi(r, cfg.rois[r], raw[r], train_ids, test_ids, audit, manifest) for r in used}
        done(stage)

        stage = "model"
        metrics = skeleton(cfg.seed, cfg.horizons)
        metrics["n_train"], metrics["n_test"] = len(train_ids), len(test_ids)
        km, shap, risks, survs = {}, {}, {}, {}
        for m in cfg.models:
            stage = f"model:{m.name}"
            entry, km[m.name], shap[m.name], risks[m.name], survs[m.name] = _fit_model(
                cfg, m, prepared, train_out, test_out, audit, out_dir
            )
            metrics["models"][m.name] = entry
            done(stage)

        for e in cfg.ensembles:
            stage = f"ensemble:{e['name']}"
            method = e.get("method", "mean")
            members = list(e["models"])
            tr_r = [risks[k][0] for k in members]
            te_r = [risks[k][1] for k in members]
            if method == "zscore":
                audit.add(f"ensemble_scaler:{e['name']}", "ensemble", train_ids)
            r_tr = ensemble_risk(tr_r, method, tr_r)
            r_te = ensemble_risk(te_r, method, tr_r)
            entry = {"kind": "ensemble", "members": members, "method": method}
            entry.update(_discrimination(cfg, train_out, test_out, r_tr, r_te))
            groups, km[e["name"]] = _risk_group_block(r_tr, r_te, test_out.time_months, test_out.event)
            audit.add(f"median_threshold:{e['name']}", "evaluate", train_ids)
            entry.update(groups)
            metrics["models"][e["name"]] = entry
            done(stage)

        consensus = None
        if cfg.consensus:
            stage = "consensus"
            members = list(cfg.consensus["models"])
            consensus = {}
            for h in cfg.consensus.get("horizons", cfg.horizons):
                key = _hkey(float(h))
                if key not in survs[members[0]]:
                    raise ValueError(f"consensus horizon {h} is not among the evaluated horizons")
                surv = {k: survs[k][key] for k in members}
                rep = build_consensus(
                    members,
                    [surv[k][0] for k in members],
                    [surv[k][1] for k in members],
                    train_out.time_months,
                    train_out.event,
                    test_out.time_months,
                    test_out.event,
                    float(h),
                    test_ids,
                )
                valid, _ = valid_at_horizon(train_out.time_months, train_out.event, float(h))
                audit.add(
                    f"youden:{key}", "consensus", [s for s, v in zip(train_ids, valid) if v]
                )
                consensus[key] = rep.to_dict()
            done(stage)

        stage = "report"
        results = {"metrics": metrics, "km": km, "shap": shap, "consensus": consensus}
        written = emit_report(results, out_dir)
        audit_path = os.path.join(out_dir, "audit.json")
        write_json({"entries": audit.entries, "test_ids": test_ids}, audit_path)
        artifacts = sorted(
            set(written)
            | {audit_path}
            | {os.path.join(out_dir, f) for f in os.listdir(out_dir) if f.endswith(".json") and f != "manifest.json"}
        )
        manifest["artifacts"] = {os.path.relpath(p, out_dir): sha256_file(p) for p in artifacts}
        manifest["thresholds"] = {
            name: {
                "corr_threshold": e.get("corr_threshold"),
                "median_risk": e["risk_groups"]["threshold"],
            }
            for name, e in metrics["models"].items()
        }
        if consensus:
            for key, rep in consensus.items():
                for name, tau in rep["thresholds"].items():
                    manifest["thresholds"].setdefault(name, {})[f"youden_{key}"] = tau
        manifest["seeds"] = {
            "split": cfg.seed,
            "selection": cfg.seed,
            "tuning": cfg.seed,
            "bootstrap": cfg.seed,
        }
        done(stage)
        manifest["status"] = "ok"
        write_json(manifest, os.path.join(out_dir, "manifest.json"))
        results.update({"audit": audit.entries, "manifest": manifest, "output_dir": out_dir})
        return results
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        if isinstance(exc, PipelineError):
            raise
        manifest["status"] = "failed"
        manifest["failed_stage"] = stage
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["audit"] = audit.entries
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
                fh.write(dumps(manifest))
        except OSError:
            pass
        raise PipelineError(stage, str(exc), manifest) from exc
