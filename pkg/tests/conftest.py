"""Shared brute-force oracles and synthetic-input fixtures."""
from __future__ import annotations

import json
import math
from collections import deque

import numpy as np

from ctsurv.dataio import FeatureTable, save_feature_table, save_outcomes
from ctsurv.synth import BatchEffect, CohortSpec, gen_cohort


# ---------------------------------------------------------------------------
# Oracles written as plain loops, independent of the vectorized code
# ---------------------------------------------------------------------------


def brute_concordance(times, events, risks):
    num = 0.0
    den = 0
    n = len(times)
    for i in range(n):
        for j in range(n):
            if i == j or not events[i]:
                continue
            earlier = times[i] < times[j] or (times[i] == times[j] and not events[j])
            if not earlier:
                continue
            den += 1
            if risks[i] > risks[j]:
                num += 1.0
            elif risks[i] == risks[j]:
                num += 0.5
    return num / den


def brute_km(times, events):
    """``{t: S(t)}`` at each distinct time by explicit risk-set counting."""
    out = {}
    s = 1.0
    for t in sorted(set(times)):
        at_risk = sum(1 for u in times if u >= t)
        d = sum(1 for u, e in zip(times, events) if u == t and e)
        s *= 1.0 - d / at_risk
        out[t] = s
    return out


def brute_censoring_g(train_times, train_events, t):
    """Right-continuous KM of the censoring distribution evaluated at ``t``."""
    km = brute_km(list(train_times), [1 - e for e in train_events])
    g = 1.0
    for u in sorted(km):
        if u <= t:
            g = km[u]
    return g


def brute_tauc(train_t, train_e, test_t, test_e, risks, horizon):
    terms = []
    wsum = []
    n_controls = sum(1 for t in test_t if t > horizon)
    for i in range(len(test_t)):
        if not (test_e[i] == 1 and test_t[i] <= horizon):
            continue
        w = 1.0 / brute_censoring_g(train_t, train_e, test_t[i])
        wsum.append(w)
        for j in range(len(test_t)):
            if test_t[j] > horizon:
                if risks[i] > risks[j]:
                    terms.append(w * 1.0)
                elif risks[i] == risks[j]:
                    terms.append(w * 0.5)
    return math.fsum(terms) / (math.fsum(wsum) * n_controls)


def flood_fill(mask2d):
    """8-connected components as a list of frozensets of (row, col)."""
    mask2d = np.asarray(mask2d, bool)
    seen = np.zeros_like(mask2d)
    comps = []
    for r in range(mask2d.shape[0]):
        for c in range(mask2d.shape[1]):
            if mask2d[r, c] and not seen[r, c]:
                comp = set()
                q = deque([(r, c)])
                seen[r, c] = True
                while q:
                    y, x = q.popleft()
                    comp.add((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if (
                                0 <= yy < mask2d.shape[0]
                                and 0 <= xx < mask2d.shape[1]
                                and mask2d[yy, xx]
                                and not seen[yy, xx]
                            ):
                                seen[yy, xx] = True
                                q.append((yy, xx))
                comps.append(frozenset(comp))
    return comps


def random_survival(rng, n, tie_pool=None, censor_p=0.4):
    """Times (optionally drawn from a small pool to force ties) and events."""
    if tie_pool:
        t = rng.choice(np.arange(1, tie_pool + 1), n).astype(float)
    else:
        t = rng.uniform(1, 100, n).round(2)
    e = (rng.uniform(size=n) > censor_p).astype(int)
    return t, e


# ---------------------------------------------------------------------------
# Pipeline inputs
# ---------------------------------------------------------------------------


def write_pipeline_inputs(dirpath, seed=3, n=240, harmonization="combat", mode="train-only", **overrides):
    """Two-ROI batch-affected cohort plus a config; returns the config path."""
    spec = CohortSpec(
        n,
        beta=(1.0, -0.5),
        n_noise=6,
        batches=(BatchEffect(0.5, name="A"), BatchEffect(0.5, shift=2.0, scale=1.5, name="B")),
        seed=seed,
    )
    f, o, _ = gen_cohort(spec)
    save_outcomes(o, dirpath / "outcomes.csv")
    tumor = FeatureTable(f.subject_ids, ("x0", "x2", "x3", "x4"), f.values[:, [0, 2, 3, 4]], f.batch)
    v = f.values[:, [1, 5, 6, 7]].copy()
    v[::17, 0] = np.nan
    nodes = FeatureTable(f.subject_ids, ("x1", "x5", "x6", "x7"), v, f.batch)
    save_feature_table(tumor, dirpath / "tumor.csv", batch_column="centre")
    save_feature_table(nodes, dirpath / "nodes.csv", batch_column="centre")
    roi = {"batch_column": "centre", "harmonization": harmonization, "combat_mode": mode}
    cfg = {
        "outcomes": "outcomes.csv",
        "rois": {"tumor": {"features": "tumor.csv", **roi}, "nodes": {"features": "nodes.csv", **roi}},
        "models": [
            {"name": "tumor", "rois": ["tumor"]},
            {"name": "nodes", "rois": ["nodes"]},
            {"name": "combined", "rois": ["tumor", "nodes"], "pca_k": [2, 3]},
        ],
        "ensembles": [{"name": "ensemble", "models": ["tumor", "nodes"], "method": "zscore"}],
        "consensus": {"models": ["tumor", "nodes", "combined"]},
        "n_trials": 6,
        "bootstrap": 50,
        "horizons": [36, 12],
        "seed": 1,
        "output_dir": "out",
    }
    cfg.update(overrides)
    path = dirpath / "config.json"
    path.write_text(json.dumps(cfg, indent=1))
    return path


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
