"""Horizon classification, strict multi-model consensus and ensembles.

A model predicts an event by the horizon (label 1) when its survival
probability there is strictly below a cutoff chosen by Youden's index on
the training set. The consensus keeps only subjects on which every model
emits the same label.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import cumulative_dynamic_auc


def valid_at_horizon(times, events, horizon):
    """``(valid, truth)``: censored-before-horizon subjects are invalid.

    Valid subjects either died by the horizon (truth 1) or were followed
    beyond it (truth 0). ``truth`` is 0 for invalid subjects.
    """
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(int)
    case = (e == 1) & (t <= horizon)
    control = t > horizon
    return case | control, case.astype(int)


def _youden_sweep(s, y):
    """All candidate cuts and their J for the rule ``S < tau`` -> event."""
    u = np.unique(s)
    # sentinels below/above every value play the role of -inf/+inf but stay finite
    cuts = np.concatenate(([u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]))
    pred = s[None, :] < cuts[:, None]
    pos, neg = y == 1, y == 0
    sens = (pred & pos).sum(axis=1) / pos.sum()
    spec = (~pred & neg).sum(axis=1) / neg.sum()
    return cuts, sens + spec - 1.0


def youden_threshold(survival_probs, truth):
    """Cutoff maximizing sensitivity + specificity - 1; ties go to the smallest cut.

    Returns ``(tau, J)``.
    """
    s = np.asarray(survival_probs, dtype=float)
    y = np.asarray(truth).astype(int)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("survival_probs and truth must be nonempty and aligned")
    if y.min() == y.max():
        raise ValueError("both classes are needed to choose a threshold")
    cuts, j = _youden_sweep(s, y)
    best = int(np.argmax(j))
    return float(cuts[best]), float(j[best])


def classify_at_horizon(survival_probs, tau) -> np.ndarray:
    """1 when ``S(t) < tau`` (strict), else 0."""
    return (np.asarray(survival_probs, dtype=float) < tau).astype(int)


def consensus_subset(label_vectors, ids=None):
    """Subjects on which every model agrees.

    Returns ``(subset_ids, consensus_labels, coverage)``; ``subset_ids``
    are positions when ``ids`` is not given.
    """
    L = np.asarray(label_vectors, dtype=int)
    if L.ndim != 2 or L.shape[0] < 2:
        raise ValueError("need label vectors from at least 2 models")
    n = L.shape[1]
    agree = np.all(L == L[0], axis=0)
    keys = np.flatnonzero(agree) if ids is None else [ids[i] for i in np.flatnonzero(agree)]
    coverage = float(agree.sum() / n) if n else 0.0
    return keys, L[0, agree], coverage


@dataclass
class ClassificationMetrics:
    n: int
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    t_auc: float | None = None

    def to_dict(self):
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "t_auc": self.t_auc,
        }


def classification_metrics(pred, truth, risks=None, train_outcomes=None, times=None, events=None, horizon=None):
    """Confusion-matrix ratios plus optional horizon t-AUC.

    Sensitivity/specificity are ``None`` when the class is absent. The
    t-AUC needs ``risks``, the training ``(times, events)`` as
    ``train_outcomes`` and the subset's own ``times``/``events``; it is
    ``None`` when undefined on the subset.
    """
    p = np.asarray(pred, dtype=int)
    y = np.asarray(truth, dtype=int)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("pred and truth must be nonempty and aligned")
    tp = int(((p == 1) & (y == 1)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    npos, nneg = int((y == 1).sum()), int((y == 0).sum())
    sens = tp / npos if npos else None
    spec = tn / nneg if nneg else None
    auc = None
    if risks is not None and train_outcomes is not None:
        try:
            auc = cumulative_dynamic_auc(train_outcomes[0], train_outcomes[1], times, events, risks, horizon)
        except ValueError:
            auc = None
    return ClassificationMetrics(int(p.size), (tp + tn) / p.size, sens, spec, auc)


def ensemble_risk(risk_vectors, method: str = "mean", train_risk_vectors=None) -> np.ndarray:
    """Average per-model risks.

    ``method="mean"`` averages the raw partial hazards. ``"zscore"``
    first standardizes each model with the mean/SD of its training risks
    (``train_risk_vectors``), since hazards from different models are on
    different scales.
    """
    R = [np.asarray(v, dtype=float) for v in risk_vectors]
    if len(R) < 2:
        raise ValueError("need at least 2 models")
    if len({v.shape for v in R}) != 1:
        raise ValueError("risk vectors differ in length")
    R = np.vstack(R)
    if method == "mean":
        return R.mean(axis=0)
    if method == "zscore":
        if train_risk_vectors is None:
            raise ValueError("zscore ensembling needs training risks")
        T = [np.asarray(v, dtype=float) for v in train_risk_vectors]
        if len(T) != R.shape[0]:
            raise ValueError("need one training risk vector per model")
        mu = np.array([t.mean() for t in T])[:, None]
        sd = np.array([t.std() for t in T])[:, None]
        sd[sd == 0] = 1.0
        return ((R - mu) / sd).mean(axis=0)
    raise ValueError(f"unknown ensemble method {method!r}")


@dataclass
class ConsensusReport:
    horizon: float
    models: list[str]
    thresholds: dict[str, float]
    n_valid: int
    subset_ids: list[str]
    coverage: float
    consensus: ClassificationMetrics
    per_model: dict[str, ClassificationMetrics] = field(default_factory=dict)

    def to_dict(self):
        return {
            "horizon_months": self.horizon,
            "models": self.models,
            "thresholds": self.thresholds,
            "n_valid": self.n_valid,
            "n_consensus": len(self.subset_ids),
            "coverage": self.coverage,
            "subset_ids": self.subset_ids,
            "consensus": self.consensus.to_dict(),
            "per_model": {k: v.to_dict() for k, v in self.per_model.items()},
        }


def build_consensus(
    names,
    train_surv,
    test_surv,
    train_times,
    train_events,
    test_times,
    test_events,
    horizon,
    test_ids=None,
) -> ConsensusReport:
    """Youden cutoffs per model on valid training subjects, then strict consensus on valid test subjects.

    ``train_surv``/``test_surv`` hold one vector of ``S(horizon)`` per
    model. Risks for the t-AUC are ``1 - S``; the consensus t-AUC uses the
    mean of ``1 - S`` across models.
    """
    names = list(names)
    vtr, ytr = valid_at_horizon(train_times, train_events, horizon)
    vte, yte = valid_at_horizon(test_times, test_events, horizon)
    test_times = np.asarray(test_times, float)
    test_events = np.asarray(test_events, int)
    ids = list(test_ids) if test_ids is not None else [str(i) for i in range(len(test_times))]
    valid_ids = [ids[i] for i in np.flatnonzero(vte)]
    train_out = (np.asarray(train_times, float), np.asarray(train_events, int))
    thresholds = {}
    labels = []
    per_model = {}
    tt, te, yv = test_times[vte], test_events[vte], yte[vte]
    for name, s_tr, s_te in zip(names, train_surv, test_surv):
        s_tr, s_te = np.asarray(s_tr, float), np.asarray(s_te, float)
        tau, _ = youden_threshold(s_tr[vtr], ytr[vtr])
        thresholds[name] = tau
        lab = classify_at_horizon(s_te[vte], tau)
        labels.append(lab)
        per_model[name] = classification_metrics(lab, yv, 1 - s_te[vte], train_out, tt, te, horizon)
    keep_pos, cons_labels, coverage = consensus_subset(labels)
    risk = np.mean([1 - np.asarray(s, float)[vte] for s in test_surv], axis=0)
    if len(keep_pos):
        cons = classification_metrics(
            cons_labels, yv[keep_pos], risk[keep_pos], train_out, tt[keep_pos], te[keep_pos], horizon
        )
    else:
        cons = ClassificationMetrics(0, None, None, None, None)
    return ConsensusReport(
        horizon=float(horizon),
        models=names,
        thresholds=thresholds,
        n_valid=int(vte.sum()),
        subset_ids=[valid_ids[i] for i in keep_pos],
        coverage=coverage,
        consensus=cons,
        per_model=per_model,
    )
