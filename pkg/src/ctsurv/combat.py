"""Reference-batch ComBat harmonization with parametric empirical Bayes.

Each feature is modelled as ``y = alpha + X beta + gamma_b + delta_b * eps``.
The reference batch fixes the location/scale frame: ``alpha`` is the
reference-batch intercept, the residual SD ``sigma`` is computed on the
reference rows only, and the reference batch gets ``gamma* = 0`` and
``delta* = 1`` so its rows pass through unchanged.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import FeatureTable

log = logging.getLogger(__name__)

EB_TOL = 1e-6
EB_MAX_ITER = 500


@dataclass(frozen=True)
class HarmonizationConfig:
    reference_batch: str
    covariate_names: tuple[str, ...] = ()
    mode: str = "pooled"  # "pooled" (transductive) or "train-only"
    eb: bool = True

    def __post_init__(self):
        if self.mode not in ("pooled", "train-only"):
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "reference_batch", str(self.reference_batch))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))


@dataclass
class CombatModel:
    feature_names: tuple[str, ...]
    reference_batch: str
    batches: tuple[str, ...]
    covariate_names: tuple[str, ...]
    alpha: np.ndarray  # (p,)
    beta: np.ndarray  # (q, p)
    sigma: np.ndarray  # (p,)
    gamma_hat: np.ndarray  # (B, p)
    delta2_hat: np.ndarray  # (B, p)
    gamma_star: np.ndarray  # (B, p)
    delta_star: np.ndarray  # (B, p), scale (not variance)
    mode: str = "pooled"
    eb: bool = True
    eb_iterations: dict = field(default_factory=dict)

    def batch_index(self, label) -> int:
        try:
            return self.batches.index(str(label))
        except ValueError:
            raise ValueError(f"batch {label!r} was not seen when fitting") from None

    def to_dict(self):
        arr = lambda a: np.asarray(a).tolist()
        return {
            "feature_names": list(self.feature_names),
            "reference_batch": self.reference_batch,
            "batches": list(self.batches),
            "covariate_names": list(self.covariate_names),
            "alpha": arr(self.alpha),
            "beta": arr(self.beta),
            "sigma": arr(self.sigma),
            "gamma_hat": arr(self.gamma_hat),
            "delta2_hat": arr(self.delta2_hat),
            "gamma_star": arr(self.gamma_star),
            "delta_star": arr(self.delta_star),
            "mode": self.mode,
            "eb": self.eb,
        }

    @classmethod
    def from_dict(cls, d):
        p = len(d["feature_names"])
        q = len(d["covariate_names"])
        return cls(
            feature_names=tuple(d["feature_names"]),
            reference_batch=d["reference_batch"],
            batches=tuple(d["batches"]),
            covariate_names=tuple(d["covariate_names"]),
            alpha=np.array(d["alpha"], float),
            beta=np.array(d["beta"], float).reshape(q, p),
            sigma=np.array(d["sigma"], float),
            gamma_hat=np.array(d["gamma_hat"], float),
            delta2_hat=np.array(d["delta2_hat"], float),
            gamma_star=np.array(d["gamma_star"], float),
            delta_star=np.array(d["delta_star"], float),
            mode=d.get("mode", "pooled"),
            eb=d.get("eb", True),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _inv_gamma_moments(d2):
    m = d2.mean()
    s2 = d2.var(ddof=1)
    return (2 * s2 + m**2) / s2, (m * s2 + m**3) / s2


def _eb_posterior(z, g_hat, d2_hat, g_bar, t2, a, b):
    """Coupled posterior updates for one batch; ``z`` is (n_b, p)."""
    n = z.shape[0]
    g_old, d_old = g_hat.copy(), d2_hat.copy()
    for it in range(1, EB_MAX_ITER + 1):
        g_new = (t2 * n * g_hat + d_old * g_bar) / (t2 * n + d_old)
        ss = ((z - g_new) ** 2).sum(axis=0)
        d_new = (0.5 * ss + b) / (n / 2.0 + a - 1.0)
        change = max(
            np.max(np.abs(g_new - g_old) / np.maximum(np.abs(g_old), 1.0)),
            np.max(np.abs(d_new - d_old) / np.maximum(np.abs(d_old), 1.0)),
        )
        g_old, d_old = g_new, d_new
        if change < EB_TOL:
            return g_new, d_new, it
    log.warning("ComBat EB iteration hit %d iterations without converging", EB_MAX_ITER)
    return g_old, d_old, EB_MAX_ITER


def _design(features: FeatureTable, covariate_names):
    return features.covariate_matrix(covariate_names)


def combat_fit(features: FeatureTable, config: HarmonizationConfig) -> CombatModel:
    y = features.values
    if features.batch is None:
        raise ValueError("feature table has no batch labels")
    if np.isnan(y).any():
        raise ValueError("missing values present; impute before ComBat")
    ref = config.reference_batch
    labels = np.asarray(features.batch)
    # sorted for a deterministic batch order, reference first
    others = sorted(set(labels) - {ref})
    if ref not in set(labels):
        raise ValueError(f"reference batch {ref!r} absent from fitting data")
    batches = (ref, *others)
    counts = {b: int((labels == b).sum()) for b in batches}
    small = [b for b, c in counts.items() if c < 2]
    if small:
        raise ValueError(f"batches with fewer than 2 subjects: {small}")

    n, p = y.shape
    X = _design(features, config.covariate_names)
    q = X.shape[1]
    onehot = np.column_stack([(labels == b).astype(float) for b in others]) if others else np.zeros((n, 0))
    D = np.column_stack([np.ones(n), onehot, X])
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    alpha = coef[0]
    beta = coef[1 + len(others):].reshape(q, p)
    stand = alpha + X @ beta

    is_ref = labels == ref
    resid_ref = y[is_ref] - stand[is_ref]
    sigma = np.sqrt((resid_ref**2).mean(axis=0))
    zero = sigma <= 1e-12 * np.maximum(np.abs(alpha), 1.0)
    if zero.any():
        bad = [features.feature_names[j] for j in np.flatnonzero(zero)]
        raise ValueError(f"zero reference-batch variance for features: {bad}")
    z = (y - stand) / sigma

    B = len(batches)
    g_hat = np.zeros((B, p))
    d2_hat = np.ones((B, p))
    for k, b in enumerate(batches):
        zb = z[labels == b]
        g_hat[k] = zb.mean(axis=0)
        d2_hat[k] = zb.var(axis=0, ddof=1)

    g_star = g_hat.copy()
    d2_star = d2_hat.copy()
    iters = {}
    use_eb = config.eb and p >= 2
    if config.eb and p < 2:
        log.warning("empirical Bayes needs >= 2 features; using per-batch estimates")
    if use_eb:
        for k, b in enumerate(batches[1:], start=1):
            g_bar = g_hat[k].mean()
            t2 = g_hat[k].var(ddof=1)
            if d2_hat[k].var(ddof=1) <= 0:
                # flat scale estimates across features: keep them, shrink location only
                g_star[k] = (t2 * counts[b] * g_hat[k] + d2_hat[k] * g_bar) / (t2 * counts[b] + d2_hat[k])
                iters[b] = 1
                continue
            a, b_ig = _inv_gamma_moments(d2_hat[k])
            g_star[k], d2_star[k], iters[b] = _eb_posterior(
                z[labels == b], g_hat[k], d2_hat[k], g_bar, t2, a, b_ig
            )
    g_star[0] = 0.0
    d2_star[0] = 1.0
    return CombatModel(
        feature_names=features.feature_names,
        reference_batch=ref,
        batches=batches,
        covariate_names=config.covariate_names,
        alpha=alpha,
        beta=beta,
        sigma=sigma,
        gamma_hat=g_hat,
        delta2_hat=d2_hat,
        gamma_star=g_star,
        delta_star=np.sqrt(d2_star),
        mode=config.mode,
        eb=use_eb,
        eb_iterations=iters,
    )


def combat_apply(model: CombatModel, features: FeatureTable) -> FeatureTable:
    """Harmonize ``features`` with a fitted model; reference rows are returned as-is."""
    if tuple(features.feature_names) != tuple(model.feature_names):
        raise ValueError("feature names differ from the fitted model")
    if features.batch is None:
        raise ValueError("feature table has no batch labels")
    y = features.values
    if np.isnan(y).any():
        raise ValueError("missing values present; impute before ComBat")
    labels = features.batch
    idx = np.array([model.batch_index(b) for b in labels], dtype=int)
    X = _design(features, model.covariate_names)
    stand = model.alpha + X @ model.beta
    z = (y - stand) / model.sigma
    out = model.sigma * (z - model.gamma_star[idx]) / model.delta_star[idx] + stand
    is_ref = idx == 0
    out[is_ref] = y[is_ref]
    return features.with_values(out)


def largest_batch(labels) -> str:
    """Most frequent label; ties go to the lexicographically smallest."""
    values, counts = np.unique(np.asarray(labels, dtype=str), return_counts=True)
    return str(values[np.argmax(counts)])
