"""Survival evaluation: concordance, KM, log-rank, hazard ratios, t-AUC, bootstrap."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "concordance",
    "KmCurve",
    "km_curve",
    "log_rank",
    "HazardRatio",
    "hazard_ratio",
    "censoring_survival",
    "cumulative_dynamic_auc",
    "BootstrapSummary",
    "bootstrap",
]


def concordance(times, events, risks) -> float:
    """Harrell's C-index.

    A pair is comparable when the shorter time is an event; with equal
    times it is comparable only if exactly one of the two is an event
    (the event counts as earlier). Higher risk should go with the earlier
    event; tied risks score one half.
    """
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    r = np.asarray(risks, dtype=float)
    if not (t.shape == e.shape == r.shape):
        raise ValueError("times, events and risks differ in length")
    # comp[i, j]: i is the earlier event of a comparable pair
    comp = e[:, None] & ((t[:, None] < t[None, :]) | ((t[:, None] == t[None, :]) & ~e[None, :]))
    n_comp = int(comp.sum())
    if n_comp == 0:
        raise ValueError("no comparable pairs")
    correct = int((comp & (r[:, None] > r[None, :])).sum())
    tied = int((comp & (r[:, None] == r[None, :])).sum())
    return (correct + 0.5 * tied) / n_comp


# ---------------------------------------------------------------------------
# Kaplan-Meier
# ---------------------------------------------------------------------------


@dataclass
class KmCurve:
    """Product-limit estimate at every distinct observed time."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    censored: np.ndarray
    greenwood_var: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step lookup; 1 before the first time."""
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.times, t, side="right")
        out = np.ones(np.shape(t))
        has = pos > 0
        out[has] = self.survival[pos[has] - 1]
        return out

    def rows(self, group=None):
        """``(time, survival, at_risk, group)`` tuples for CSV export."""
        return [(float(t), float(s), int(n), group) for t, s, n in zip(self.times, self.survival, self.at_risk)]


def km_curve(times, events) -> KmCurve:
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(int)
    if t.size == 0:
        raise ValueError("empty sample")
    uniq, inv = np.unique(t, return_inverse=True)
    d = np.bincount(inv, weights=e, minlength=uniq.size)
    c = np.bincount(inv, minlength=uniq.size) - d
    n_risk = t.size - np.concatenate(([0], np.cumsum(d + c)[:-1]))
    s = np.cumprod(1.0 - d / n_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(d > 0, d / (n_risk * (n_risk - d)), 0.0)
        gw = s**2 * np.cumsum(terms)
    gw = np.where(s == 0, np.nan, gw)
    return KmCurve(uniq, s, n_risk.astype(int), d.astype(int), c.astype(int), gw)


def censoring_survival(times, events) -> KmCurve:
    """KM estimate of the censoring distribution (event indicator flipped)."""
    return km_curve(times, 1 - np.asarray(events).astype(int))


# ---------------------------------------------------------------------------
# Log-rank and hazard ratio
# ---------------------------------------------------------------------------


def log_rank(times_a, events_a, times_b, events_b):
    """Two-group log-rank test; returns ``(chi2, p)`` with 1 df."""
    ta, tb = np.asarray(times_a, float), np.asarray(times_b, float)
    ea, eb = np.asarray(events_a).astype(int), np.asarray(events_b).astype(int)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be nonempty")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    if e.sum() == 0:
        raise ValueError("no events in either group")
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    ev_times = np.unique(t[e == 1])
    n = (t[None, :] >= ev_times[:, None]).sum(axis=1)
    n_a = ((t[None, :] >= ev_times[:, None]) & in_a).sum(axis=1)
    at = t[None, :] == ev_times[:, None]
    d = (at & (e == 1)).sum(axis=1)
    d_a = (at & (e == 1) & in_a).sum(axis=1)
    o_minus_e = (d_a - d * n_a / n).sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        v_terms = np.where(n > 1, n_a * (n - n_a) * d * (n - d) / (n**2 * (n - 1.0)), 0.0)
    var = v_terms.sum()
    if var <= 0:
        return 0.0, 1.0
    chi2 = float(o_minus_e**2 / var)
    return chi2, float(stats.chi2.sf(chi2, 1))


@dataclass
class HazardRatio:
    hr: float
    ci_low: float
    ci_high: float
    p: float
    log_hr: float
    se: float
    separated: bool = False

    def to_dict(self):
        return {
            "hr": self.hr,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p": self.p,
            "log_hr": self.log_hr,
            "se": self.se,
            "separated": self.separated,
        }


def hazard_ratio(times, events, group) -> HazardRatio:
    """Univariable unpenalized Cox on a binary group (1 vs 0); Wald CI and p.

    The group is coded as +-0.5 so that swapping labels mirrors the fit
    exactly. When the likelihood is monotone (complete separation) the
    estimate diverges; ``separated`` is set and the CI is ``(0, inf)``.
    """
    from .cox import _fit_beta, _risk_sets, efron_loglik

    g = np.asarray(group)
    levels = set(np.unique(g).tolist())
    if not levels <= {0, 1, True, False} or len(levels) < 2:
        raise ValueError("group must contain both levels 0 and 1")
    e = np.asarray(events).astype(int)
    if e.sum() == 0:
        raise ValueError("no events")
    x = (g.astype(float) - 0.5)[:, None]
    rs = _risk_sets(times, e)
    beta, _, _, converged, _ = _fit_beta(x, rs, len(e), 0.0, 0.0)
    b = float(beta[0])
    _, _, hess = efron_loglik(x, None, None, beta, _rs=rs)
    info = -hess[0, 0]
    separated = (not converged) or abs(b) > 15 or info < 1e-8
    if separated:
        return HazardRatio(float(np.exp(b)), 0.0, float("inf"), float("nan"), b, float("inf"), True)
    se = float(np.sqrt(1.0 / info))
    z = b / se
    return HazardRatio(
        float(np.exp(b)),
        float(np.exp(b - 1.96 * se)),
        float(np.exp(b + 1.96 * se)),
        float(2 * stats.norm.sf(abs(z))),
        b,
        se,
    )


# ---------------------------------------------------------------------------
# Time-dependent AUC
# ---------------------------------------------------------------------------


def cumulative_dynamic_auc(train_times, train_events, test_times, test_events, risks, horizon) -> float:
    """IPCW cumulative/dynamic AUC at ``horizon``.

    Cases are test events with time <= horizon, each weighted by
    ``1 / G(t_i)`` where ``G`` is the KM censoring survival fitted on the
    training outcomes; controls are test subjects with time > horizon,
    weighted equally. Tied risks count one half.
    """
    tt = np.asarray(test_times, dtype=float)
    te = np.asarray(test_events).astype(int)
    r = np.asarray(risks, dtype=float)
    if not (tt.shape == te.shape == r.shape):
        raise ValueError("test arrays differ in length")
    cases = (te == 1) & (tt <= horizon)
    controls = tt > horizon
    if not cases.any() or not controls.any():
        raise ValueError(f"no cases or no controls at horizon {horizon}")
    G = censoring_survival(train_times, train_events)
    g = G(tt[cases])
    if np.any(g <= 0):
        raise ValueError("censoring survival reaches 0 before a case time; horizon beyond follow-up")
    w = 1.0 / g
    rc, rn = r[cases], r[controls]
    score = (rc[:, None] > rn[None, :]) + 0.5 * (rc[:, None] == rn[None, :])
    # fsum over exact products: the result does not depend on summation order
    num = math.fsum((w[:, None] * score).ravel())
    return num / (math.fsum(w) * int(controls.sum()))


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapSummary:
    estimate: float
    ci_low: float
    ci_high: float
    p_below_half: float
    p_two_sided: float
    n_replicates: int
    n_skipped: int
    seed: int | None

    def to_dict(self):
        return {
            "estimate": self.estimate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p": self.p_below_half,
            "p_two_sided": self.p_two_sided,
            "n_replicates": self.n_replicates,
            "n_skipped": self.n_skipped,
            "seed": self.seed,
        }


def bootstrap(metric, data, n: int = 1000, seed: int | None = 0, return_replicates: bool = False):
    """Percentile bootstrap of ``metric(*arrays)`` over resampled subjects.

    ``data`` is a sequence of equal-length arrays resampled jointly.
    Replicates where ``metric`` raises ``ValueError`` are skipped; more
    than half skipped is an error. ``p_below_half`` is the fraction of
    replicates below 0.5; ``p_two_sided`` is ``2 * min(frac below,
    frac above)`` capped at 1.
    """
    arrays = [np.asarray(a) for a in data]
    m = len(arrays[0])
    if any(len(a) != m for a in arrays):
        raise ValueError("data arrays differ in length")
    estimate = float(metric(*arrays))
    reps = []
    skipped = 0
    for i in range(n):
        # one stream per replicate keeps results independent of scheduling
        rng = np.random.default_rng([0 if seed is None else seed, i])
        idx = rng.integers(0, m, m)
        try:
            reps.append(float(metric(*(a[idx] for a in arrays))))
        except ValueError:
            skipped += 1
    if skipped > n / 2:
        raise ValueError(f"{skipped} of {n} bootstrap replicates were degenerate")
    vals = np.array(reps)
    lo, hi = np.percentile(vals, [2.5, 97.5])
    below = float((vals < 0.5).mean())
    above = float((vals > 0.5).mean())
    summary = BootstrapSummary(
        estimate, float(lo), float(hi), below, min(1.0, 2 * min(below, above)), vals.size, skipped, seed
    )
    return (summary, vals) if return_replicates else summary
