"""Imputation, cross-validated feature filtering and PCA.

The selection pipeline runs a variance filter once on the full training
table, then a correlation filter on the training split of each stratified
fold. Features surviving in more than half of the folds are retained.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._folds import fold_splits, stratified_folds
from .dataio import FeatureTable, OutcomeTable

IMPUTE_STRATEGIES = ("median", "mode", "constant")
TIE_TOL = 1e-12


@dataclass
class Imputer:
    """Column fill values learned on training rows.

    ``strategies`` maps feature name to ``"median"`` (numeric), ``"mode"``
    (categorical codes) or ``"constant"`` (an explicit missing-category
    code, ``fill_value``). Unlisted features use ``default``.
    """

    feature_names: tuple[str, ...] = ()
    fill: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def fit(cls, table: FeatureTable, strategies=None, default="median", fill_value=-1.0):
        strategies = dict(strategies or {})
        unknown = set(strategies.values()) | {default}
        bad = unknown - set(IMPUTE_STRATEGIES)
        if bad:
            raise ValueError(f"unknown imputation strategies: {sorted(bad)}")
        fill = np.empty(table.n_features)
        for j, name in enumerate(table.feature_names):
            col = table.values[:, j]
            obs = col[~np.isnan(col)]
            how = strategies.get(name, default)
            if how == "constant":
                fill[j] = fill_value
                continue
            if obs.size == 0:
                raise ValueError(f"feature {name!r} is entirely missing in the training data")
            if how == "median":
                fill[j] = np.median(obs)
            else:
                vals, counts = np.unique(obs, return_counts=True)
                fill[j] = vals[np.argmax(counts)]
        return cls(table.feature_names, fill)

    def apply(self, table: FeatureTable) -> FeatureTable:
        if tuple(table.feature_names) != tuple(self.feature_names):
            raise ValueError("feature names differ from the fitted imputer")
        v = table.values.copy()
        rows, cols = np.nonzero(np.isnan(v))
        v[rows, cols] = self.fill[cols]
        return table.with_values(v)


def impute(train: FeatureTable, strategy="median", others=()):
    """Fit on ``train`` and fill it and every table in ``others``.

    ``strategy`` is a strategy name or a per-feature mapping. Returns the
    imputed training table, then the imputed ``others`` as a list.
    """
    if isinstance(strategy, str):
        imp = Imputer.fit(train, default=strategy)
    else:
        imp = Imputer.fit(train, strategies=strategy)
    return imp.apply(train), [imp.apply(t) for t in others]


def variance_filter(matrix, tol: float = 1e-8) -> np.ndarray:
    """Column indices whose population variance exceeds ``tol``."""
    m = np.asarray(matrix, dtype=float)
    if np.isnan(m).any():
        raise ValueError("missing values present")
    return np.flatnonzero(m.var(axis=0) > tol)


def correlation_filter(matrix, threshold: float) -> np.ndarray:
    """Greedy removal of features in pairs with ``|r| >= threshold``.

    The strongest remaining pair is examined first (ties: lowest
    ``(i, j)``); of the two, the feature with the larger mean absolute
    correlation to the other survivors is dropped, the later column on a
    tie (means within ``TIE_TOL``). Returns the surviving column indices in input order.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    m = np.asarray(matrix, dtype=float)
    p = m.shape[1]
    if p < 2:
        return np.arange(p)
    if np.isnan(m).any():
        raise ValueError("missing values present")
    r = np.abs(np.corrcoef(m, rowvar=False))
    if np.isnan(r).any():
        raise ValueError("zero-variance feature present; run variance_filter first")
    np.fill_diagonal(r, 0.0)
    alive = np.ones(p, dtype=bool)
    while alive.sum() > 1:
        sub = np.where(np.outer(alive, alive), r, -1.0)
        upper = np.triu(sub, 1)
        flat = int(np.argmax(upper))
        i, j = divmod(flat, p)
        if upper[i, j] < threshold:
            break
        k = alive.sum() - 1
        mean_i = r[i, alive].sum() / k
        mean_j = r[j, alive].sum() / k
        # means within rounding noise count as tied; the later column goes
        alive[i if mean_i > mean_j + TIE_TOL else j] = False
    return np.flatnonzero(alive)


@dataclass
class SelectionReport:
    features: list[str]
    dropped_constant: list[str]
    dropped_correlated: dict[str, list[str]]  # fold -> names
    fold_selected: list[list[str]]
    selection_frequency: dict[str, float]
    retained: list[str]
    threshold: float
    n_folds: int
    seed: int | None

    def to_dict(self):
        return {
            "features": self.features,
            "dropped_constant": self.dropped_constant,
            "dropped_correlated": self.dropped_correlated,
            "fold_selected": self.fold_selected,
            "selection_frequency": self.selection_frequency,
            "retained": self.retained,
            "threshold": self.threshold,
            "n_folds": self.n_folds,
            "seed": self.seed,
        }


def stability_select(
    features: FeatureTable,
    outcomes: OutcomeTable,
    threshold_corr: float = 0.90,
    n_folds: int = 5,
    seed: int | None = 0,
    variance_tol: float = 1e-8,
    folds=None,
) -> SelectionReport:
    """Variance filter once, correlation filter per fold, keep frequency > 0.5.

    ``folds`` overrides the stratified assignment (one fold index per row).
    """
    if tuple(features.subject_ids) != tuple(outcomes.subject_ids):
        raise ValueError("features and outcomes are not aligned")
    X = features.values
    if np.isnan(X).any():
        raise ValueError("missing values present; impute first")
    names = list(features.feature_names)
    if folds is None:
        folds = stratified_folds(outcomes.event, n_folds, seed)
    else:
        folds = np.asarray(folds, dtype=int)
        n_folds = int(folds.max()) + 1
    keep = variance_filter(X, variance_tol)
    dropped_constant = [names[j] for j in range(len(names)) if j not in set(keep)]
    hits = np.zeros(len(names))
    fold_selected = []
    dropped_corr = {}
    for k, (tr, _) in enumerate(fold_splits(folds)):
        sub = X[np.ix_(tr, keep)]
        # a feature can be constant within one fold's training split
        local = variance_filter(sub, variance_tol)
        surv = keep[local[correlation_filter(sub[:, local], threshold_corr)]]
        hits[surv] += 1
        fold_selected.append([names[j] for j in surv])
        dropped_corr[str(k)] = [names[j] for j in keep if j not in set(surv)]
    freq = hits / n_folds
    return SelectionReport(
        features=names,
        dropped_constant=dropped_constant,
        dropped_correlated=dropped_corr,
        fold_selected=fold_selected,
        selection_frequency={names[j]: float(freq[j]) for j in range(len(names))},
        retained=[names[j] for j in range(len(names)) if freq[j] > 0.5],
        threshold=threshold_corr,
        n_folds=n_folds,
        seed=seed,
    )


@dataclass
class PcaModel:
    components: np.ndarray  # (k, p), orthonormal rows
    mean: np.ndarray  # (p,)
    explained_variance: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(matrix, k: int) -> PcaModel:
    """Top-``k`` principal axes; each axis's first nonzero loading is positive."""
    m = np.asarray(matrix, dtype=float)
    n, p = m.shape
    if not 1 <= k <= min(n - 1, p):
        raise ValueError(f"k={k} out of range [1, {min(n - 1, p)}]")
    if np.isnan(m).any():
        raise ValueError("missing values present")
    mean = m.mean(axis=0)
    _, s, vt = np.linalg.svd(m - mean, full_matrices=False)
    comps = vt[:k].copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return PcaModel(comps, mean, s[:k] ** 2 / (n - 1))


def pca_transform(model: PcaModel, matrix) -> np.ndarray:
    return (np.asarray(matrix, dtype=float) - model.mean) @ model.components.T
