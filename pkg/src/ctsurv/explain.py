"""Exact SHAP attributions for linear Cox risk scores.

For a linear log-hazard with independent features the Shapley value of
feature ``j`` is ``beta_j * (x_j - mu_j)`` for background means ``mu``.
Attributions are on the log partial hazard scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cox import CoxModel

SCALE = "log_partial_hazard"


@dataclass
class Attribution:
    feature_names: tuple[str, ...]
    values: np.ndarray  # (n, p)
    background: np.ndarray  # (p,)
    base_value: float
    coef: np.ndarray  # (p,)
    scale: str = SCALE


def shap_linear(model: CoxModel, X, background_means=None) -> Attribution:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.beta.size:
        raise ValueError(f"expected an (n, {model.beta.size}) matrix")
    mu = model.train_means if background_means is None else np.asarray(background_means, dtype=float)
    if mu.shape != model.beta.shape:
        raise ValueError("background_means has the wrong length")
    phi = (X - mu) * model.beta
    base = float(model.beta @ (mu - model.train_means))
    return Attribution(tuple(model.feature_names), phi, mu, base, model.beta.copy())


def shap_summary(attr: Attribution, k: int = 20):
    """Top-``k`` features by mean |phi|, ties broken by name.

    ``direction`` is +1 when larger feature values raise the risk, -1 when
    they lower it, 0 for a zero coefficient. ``values`` is the per-subject
    phi column, kept for plotting.
    """
    phi = attr.values
    p = len(attr.feature_names)
    mean_abs = np.abs(phi).mean(axis=0) if phi.shape[0] else np.zeros(p)
    order = sorted(range(p), key=lambda j: (-mean_abs[j], attr.feature_names[j]))
    return [
        {
            "feature": attr.feature_names[j],
            "mean_abs": float(mean_abs[j]),
            "direction": int(np.sign(attr.coef[j])),
            "values": phi[:, j].copy(),
        }
        for j in order[:k]
    ]
