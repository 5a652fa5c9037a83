"""Run report files: metrics JSON, KM curve CSV, SHAP summary CSV, consensus JSON."""
from __future__ import annotations

import csv
import json
import math
import os

METRICS_FILE = "metrics.json"
CONSENSUS_FILE = "consensus.json"
SCHEMA_VERSION = 1

_num = {"type": ["number", "null"]}
_boot = {
    "type": "object",
    "required": ["estimate", "ci_low", "ci_high", "p", "p_two_sided", "n_replicates", "n_skipped", "seed"],
    "properties": {
        "estimate": _num,
        "ci_low": _num,
        "ci_high": _num,
        "p": _num,
        "p_two_sided": _num,
        "n_replicates": {"type": "integer"},
        "n_skipped": {"type": "integer"},
        "seed": {"type": ["integer", "null"]},
    },
}
_maybe_boot = {"anyOf": [_boot, {"type": "null"}]}

MODEL_SCHEMA = {
    "type": "object",
    "required": ["kind", "c_index", "t_auc", "risk_groups", "log_rank", "hazard_ratio"],
    "properties": {
        "kind": {"enum": ["cox", "ensemble"]},
        "features": {"type": "array", "items": {"type": "string"}},
        "params": {"type": "object"},
        "cv_cindex": _num,
        "c_index": {
            "type": "object",
            "required": ["train", "test"],
            "properties": {"train": _num, "test": _maybe_boot},
        },
        "t_auc": {"type": "object", "additionalProperties": _maybe_boot},
        "risk_groups": {
            "type": "object",
            "required": ["threshold", "n_high", "n_low"],
            "properties": {"threshold": _num, "n_high": {"type": "integer"}, "n_low": {"type": "integer"}},
        },
        "log_rank": {
            "anyOf": [
                {"type": "null"},
                {"type": "object", "required": ["chi2", "p"], "properties": {"chi2": _num, "p": _num}},
            ]
        },
        "hazard_ratio": {
            "anyOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["hr", "ci_low", "ci_high", "p"],
                    "properties": {"hr": _num, "ci_low": _num, "ci_high": _num, "p": _num},
                },
            ]
        },
    },
}

METRICS_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "seed", "horizons", "models"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": ["integer", "null"]},
        "n_train": {"type": "integer"},
        "n_test": {"type": "integer"},
        "horizons": {"type": "array", "items": {"type": "number"}},
        "models": {"type": "object", "additionalProperties": MODEL_SCHEMA},
    },
}


def _clean(obj):
    """JSON-safe copy: non-finite floats become null (inf keeps a string tag)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _clean(obj.tolist())
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        if math.isinf(obj):
            return None
        return obj
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def skeleton(seed=None, horizons=(60,)):
    return {"schema_version": SCHEMA_VERSION, "seed": seed, "horizons": list(horizons), "models": {}}


def emit_report(results: dict, out_dir) -> list[str]:
    """Write every report file under ``out_dir``; returns the written paths.

    ``results`` holds ``metrics`` (dict per :data:`METRICS_SCHEMA`),
    optional ``km`` (model -> list of ``(time, survival, at_risk, group)``),
    ``shap`` (model -> list of ``(feature, mean_abs, direction)``) and
    ``consensus`` (horizon -> report dict).
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out_dir!r} is not writable: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir!r} is not writable")
    written = []
    metrics = results.get("metrics") or skeleton()
    path = os.path.join(out_dir, METRICS_FILE)
    write_json(metrics, path)
    written.append(path)
    for name, rows in sorted((results.get("km") or {}).items()):
        path = os.path.join(out_dir, f"km_{name}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "survival", "at_risk", "group"])
            for t, s, n, g in rows:
                w.writerow([repr(float(t)), repr(float(s)), int(n), g])
        written.append(path)
    for name, rows in sorted((results.get("shap") or {}).items()):
        path = os.path.join(out_dir, f"shap_{name}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "mean_abs_phi", "direction"])
            for feat, val, direction in rows:
                w.writerow([feat, repr(float(val)), int(direction)])
        written.append(path)
    if results.get("consensus") is not None:
        path = os.path.join(out_dir, CONSENSUS_FILE)
        write_json(results["consensus"], path)
        written.append(path)
    return written


def read_report(out_dir) -> dict:
    """Inverse of :func:`emit_report`."""
    with open(os.path.join(out_dir, METRICS_FILE), encoding="utf-8") as fh:
        out = {"metrics": json.load(fh), "km": {}, "shap": {}, "consensus": None}
    for fname in sorted(os.listdir(out_dir)):
        path = os.path.join(out_dir, fname)
        if fname.startswith("km_") and fname.endswith(".csv"):
            with open(path, encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            out["km"][fname[3:-4]] = [
                (float(r["time"]), float(r["survival"]), int(r["at_risk"]), r["group"]) for r in rows
            ]
        elif fname.startswith("shap_") and fname.endswith(".csv"):
            with open(path, encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            out["shap"][fname[5:-4]] = [(r["feature"], float(r["mean_abs_phi"]), int(r["direction"])) for r in rows]
    cpath = os.path.join(out_dir, CONSENSUS_FILE)
    if os.path.exists(cpath):
        with open(cpath, encoding="utf-8") as fh:
            out["consensus"] = json.load(fh)
    return out
