"""Elastic-net Cox proportional hazards.

The fitted objective is

    -loglik(beta) / n + penalty * (l1_ratio * |beta|_1 + (1 - l1_ratio) / 2 * |beta|_2^2)

with Efron's tie correction in the partial likelihood. It is minimized by
proximal Newton: the smooth part (likelihood plus ridge term) is expanded
to second order around the current iterate and the L1 term is handled by
cyclic soft-thresholding coordinate descent on that quadratic, followed
by a backtracking line search on the true objective.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ._folds import fold_splits, stratified_folds
from .dataio import OutcomeTable

log = logging.getLogger(__name__)

OUTER_TOL = 1e-7
MAX_OUTER = 100
MAX_INNER = 1000
INNER_TOL = 1e-10


# ---------------------------------------------------------------------------
# Efron partial likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _RiskSets:
    """Sorted layout of a survival sample shared by likelihood evaluations.

    One "term" per event subject, in sorted order; tied events form a
    contiguous group sharing a distinct event time.
    """

    order: np.ndarray  # subjects sorted by time ascending
    time: np.ndarray  # sorted times
    ev_idx: np.ndarray  # sorted positions of events (one per term)
    group: np.ndarray  # distinct-event-time index of each term
    group_start: np.ndarray  # first term of each group
    group_first: np.ndarray  # sorted position of the first subject at each event time
    frac: np.ndarray  # l / d for each term (Efron weights)
    pos: np.ndarray  # per sorted subject: number of event times <= its time


def _risk_sets(time, event) -> _RiskSets:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(int)
    order = np.argsort(time, kind="stable")
    t = time[order]
    ev_idx = np.flatnonzero(event[order] == 1)
    uniq, group_start, sizes = np.unique(t[ev_idx], return_index=True, return_counts=True)
    group = np.repeat(np.arange(uniq.size), sizes)
    rank = np.arange(ev_idx.size) - group_start[group]
    frac = rank / sizes[group]
    group_first = np.searchsorted(t, uniq, side="left")
    pos = np.searchsorted(uniq, t, side="right")
    return _RiskSets(order, t, ev_idx, group, group_start, group_first, frac, pos)


def efron_loglik(X, time, event, beta, hessian=True, _rs=None):
    """Efron partial log-likelihood, gradient and Hessian (unscaled sums).

    Returns ``(loglik, grad, hess)``; ``hess`` is ``None`` when not
    requested. ``hess`` is the Hessian of the log-likelihood (negative
    semidefinite).
    """
    X = np.asarray(X, dtype=float)
    rs = _rs if _rs is not None else _risk_sets(time, event)
    Xs = X[rs.order]
    n, p = Xs.shape
    if rs.ev_idx.size == 0:
        return 0.0, np.zeros(p), (np.zeros((p, p)) if hessian else None)
    eta = Xs @ np.asarray(beta, dtype=float)
    # shift for overflow safety; the likelihood is invariant to it
    shift = eta.max()
    w = np.exp(eta - shift)
    # reverse cumulative sums give risk-set totals at each sorted position
    cw = np.cumsum(w[::-1])[::-1]
    cwx = np.cumsum((w[:, None] * Xs)[::-1], axis=0)[::-1]

    ev, g, frac = rs.ev_idx, rs.group, rs.frac
    first = rs.group_first[g]
    s0_d = np.add.reduceat(w[ev], rs.group_start)[g]
    s1_d = np.add.reduceat(w[ev, None] * Xs[ev], rs.group_start, axis=0)[g]
    phi = cw[first] - frac * s0_d
    s1 = (cwx[first] - frac[:, None] * s1_d) / phi[:, None]
    ll = float((eta[ev] - shift).sum() - np.log(phi).sum())
    grad = Xs[ev].sum(axis=0) - s1.sum(axis=0)
    if not hessian:
        return ll, grad, None
    # S2 terms collapse to X^T diag(w * coef) X: each subject sits in the risk
    # set of every event time <= its own time
    c_t = np.add.reduceat(1.0 / phi, rs.group_start)
    a_t = np.add.reduceat(frac / phi, rs.group_start)
    coef = np.zeros(n)
    has = rs.pos > 0
    coef[has] = np.cumsum(c_t)[rs.pos[has] - 1]
    coef[ev] -= a_t[g]
    hess = -(Xs * (w * coef)[:, None]).T @ Xs + s1.T @ s1
    return ll, grad, hess


def breslow_cumhaz(time, event, lin_pred):
    """Breslow baseline cumulative hazard at the distinct event times."""
    rs = _risk_sets(time, event)
    w = np.exp(np.asarray(lin_pred, dtype=float)[rs.order])
    cw = np.cumsum(w[::-1])[::-1]
    deaths = np.diff(np.append(rs.group_start, rs.ev_idx.size))
    return rs.time[rs.group_first], np.cumsum(deaths / cw[rs.group_first])


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class CoxModel:
    feature_names: tuple[str, ...]
    beta: np.ndarray
    train_means: np.ndarray
    baseline_times: np.ndarray
    baseline_cumhaz: np.ndarray
    penalty: float
    l1_ratio: float
    objective: float = float("nan")
    iterations: int = 0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    def _matrix(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.beta.size:
            raise ValueError(f"expected {self.beta.size} features, got {X.shape[1]}")
        return X

    def linear_predictor(self, X) -> np.ndarray:
        return (self._matrix(X) - self.train_means) @ self.beta

    def partial_hazard(self, X) -> np.ndarray:
        return np.exp(self.linear_predictor(X))

    def cumulative_baseline(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        pos = np.searchsorted(self.baseline_times, t, side="right")
        out = np.zeros(t.shape)
        has = pos > 0
        out[has] = self.baseline_cumhaz[pos[has] - 1]
        return out

    def survival_function(self, X, t) -> np.ndarray:
        """``S(t | x) = exp(-H0(t) * partial_hazard(x))``.

        Shape ``(n,)`` for scalar ``t``, otherwise ``(n, len(t))``.
        """
        if np.any(np.asarray(t) < 0):
            raise ValueError("t must be >= 0")
        s = np.exp(-np.outer(self.partial_hazard(X), self.cumulative_baseline(t)))
        return s[:, 0] if np.ndim(t) == 0 else s

    def to_dict(self):
        return {
            "feature_names": list(self.feature_names),
            "beta": self.beta.tolist(),
            "train_means": self.train_means.tolist(),
            "baseline": {
                "time": self.baseline_times.tolist(),
                "cumhaz": self.baseline_cumhaz.tolist(),
            },
            "penalty": self.penalty,
            "l1_ratio": self.l1_ratio,
            "diagnostics": {
                "objective": self.objective,
                "iterations": self.iterations,
                "converged": self.converged,
            },
        }

    @classmethod
    def from_dict(cls, d):
        diag = d.get("diagnostics", {})
        return cls(
            feature_names=tuple(d["feature_names"]),
            beta=np.array(d["beta"], float),
            train_means=np.array(d["train_means"], float),
            baseline_times=np.array(d["baseline"]["time"], float),
            baseline_cumhaz=np.array(d["baseline"]["cumhaz"], float),
            penalty=float(d["penalty"]),
            l1_ratio=float(d["l1_ratio"]),
            objective=float(diag.get("objective", float("nan"))),
            iterations=int(diag.get("iterations", 0)),
            converged=bool(diag.get("converged", True)),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def partial_hazard(model: CoxModel, x) -> float | np.ndarray:
    out = model.partial_hazard(x)
    return float(out[0]) if np.ndim(x) == 1 else out


def survival_function(model: CoxModel, x, t):
    out = model.survival_function(x, t)
    return float(np.ravel(out)[0]) if np.ndim(x) == 1 and np.ndim(t) == 0 else out


def _soft(z, lam):
    return np.sign(z) * max(abs(z) - lam, 0.0)


def _objective(X, rs, beta, n, l1, l2):
    ll, _, _ = efron_loglik(X, None, None, beta, hessian=False, _rs=rs)
    return -ll / n + l1 * np.abs(beta).sum() + 0.5 * l2 * beta @ beta


def _prox_newton_step(beta, g, H, l1):
    """Minimize g.d + d.H.d/2 + l1*|beta + d|_1 by coordinate descent."""
    p = beta.size
    new = beta.copy()
    d = np.zeros(p)
    Hd = np.zeros(p)
    diag = np.diag(H)
    for _ in range(MAX_INNER):
        max_change = 0.0
        for j in range(p):
            if diag[j] <= 0:
                continue
            rj = g[j] + Hd[j] - diag[j] * d[j]
            bj = _soft(diag[j] * beta[j] - rj, l1) / diag[j]
            step = bj - new[j]
            if step != 0.0:
                new[j] = bj
                d[j] += step
                Hd += H[:, j] * step
                max_change = max(max_change, abs(step))
        if max_change < INNER_TOL:
            break
    return new


def _fit_beta(X, rs, n, penalty, l1_ratio, beta0=None):
    p = X.shape[1]
    l1 = penalty * l1_ratio
    l2 = penalty * (1.0 - l1_ratio)
    beta = np.zeros(p) if beta0 is None else np.asarray(beta0, float).copy()
    f = _objective(X, rs, beta, n, l1, l2)
    history = [f]
    converged = False
    it = 0
    for it in range(1, MAX_OUTER + 1):
        _, grad, hess = efron_loglik(X, None, None, beta, _rs=rs)
        g = -grad / n + l2 * beta
        H = -hess / n + l2 * np.eye(p)
        target = _prox_newton_step(beta, g, H, l1)
        direction = target - beta
        if np.max(np.abs(direction), initial=0.0) < OUTER_TOL:
            converged = True
            break
        t = 1.0
        while True:
            cand = beta + t * direction
            f_new = _objective(X, rs, cand, n, l1, l2)
            if np.isfinite(f_new) and f_new <= f:
                break
            t *= 0.5
            if t < 1e-10:
                cand, f_new = beta, f
                break
        step = np.max(np.abs(cand - beta), initial=0.0)
        beta, f = cand, f_new
        history.append(f)
        if step < OUTER_TOL:
            converged = True
            break
    return beta, f, it, converged, history


def _validate_design(X, time, event):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains missing or non-finite values")
    event = np.asarray(event).astype(int)
    if event.sum() == 0:
        raise ValueError("no events")
    if X.shape[0] != len(event):
        raise ValueError("X rows and outcomes differ in length")
    const = np.ptp(X, axis=0) == 0 if X.shape[0] else np.zeros(X.shape[1], bool)
    if const.any():
        raise ValueError(f"constant columns: {np.flatnonzero(const).tolist()}")
    return X


def cox_fit(
    X,
    outcomes: OutcomeTable,
    penalty: float = 0.0,
    l1_ratio: float = 0.0,
    feature_names=None,
) -> CoxModel:
    """Fit an elastic-net Cox model.

    ``X`` is ``(n, p)`` aligned with ``outcomes``. Columns are centred on
    their training means before fitting. Non-convergence is reported via
    ``model.converged`` rather than raised.
    """
    if penalty < 0 or not 0 <= l1_ratio <= 1:
        raise ValueError("penalty must be >= 0 and l1_ratio in [0, 1]")
    time, event = outcomes.time_months, outcomes.event
    X = _validate_design(X, time, event)
    n, p = X.shape
    means = X.mean(axis=0)
    Xc = X - means
    rs = _risk_sets(time, event)
    beta, f, it, converged, history = _fit_beta(Xc, rs, n, penalty, l1_ratio)
    if not converged:
        log.warning("Cox fit did not converge in %d iterations (penalty=%g)", MAX_OUTER, penalty)
    bt, bh = breslow_cumhaz(time, event, Xc @ beta)
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ValueError("feature_names length does not match X")
    return CoxModel(names, beta, means, bt, bh, float(penalty), float(l1_ratio), float(f), it, converged, history)


def median_risk_groups(model: CoxModel, X_train, X_eval):
    """High risk iff the partial hazard exceeds the training median (strict).

    Returns ``(is_high, threshold)``.
    """
    thr = float(np.median(model.partial_hazard(X_train)))
    return model.partial_hazard(X_eval) > thr, thr


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    penalty: tuple[float, float] = (1e-4, 10.0)
    l1_ratio: tuple[float, float] = (0.0, 1.0)
    pca_k: tuple[int, ...] | None = None

    def sample(self, rng):
        lo, hi = self.penalty
        pen = lo if lo == hi else float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        a, b = self.l1_ratio
        l1r = a if a == b else float(rng.uniform(a, b))
        k = None
        if self.pca_k:
            k = int(self.pca_k[rng.integers(len(self.pca_k))])
        return {"penalty": pen, "l1_ratio": l1r, "pca_k": k}


@dataclass
class TuneResult:
    best: dict
    best_score: float
    trials: list
    seed: int | None
    n_trials: int
    n_folds: int

    def to_dict(self):
        return {
            "best": self.best,
            "best_score": self.best_score,
            "trials": self.trials,
            "seed": self.seed,
            "n_trials": self.n_trials,
            "n_folds": self.n_folds,
        }


def cv_score(X, outcomes: OutcomeTable, params, folds) -> float:
    """Mean validation C-index of one configuration over the given folds."""
    from .featsel import pca_fit, pca_transform
    from .metrics import concordance

    scores = []
    for tr, va in fold_splits(folds):
        Xtr, Xva = X[tr], X[va]
        k = params.get("pca_k")
        if k:
            k = min(k, Xtr.shape[0] - 1, Xtr.shape[1])
            pca = pca_fit(Xtr, k)
            Xtr, Xva = pca_transform(pca, Xtr), pca_transform(pca, Xva)
        otr = _take(outcomes, tr)
        ova = _take(outcomes, va)
        if otr.event.sum() == 0:
            raise ValueError("degenerate fold: no events in a training split")
        keep = np.ptp(Xtr, axis=0) > 0
        model = cox_fit(Xtr[:, keep], otr, params["penalty"], params["l1_ratio"])
        risk = model.linear_predictor(Xva[:, keep])
        try:
            scores.append(concordance(ova.time_months, ova.event, risk))
        except ValueError:
            scores.append(np.nan)
    return float(np.nanmean(scores))


def _take(outcomes: OutcomeTable, idx):
    return OutcomeTable(
        tuple(outcomes.subject_ids[i] for i in idx),
        outcomes.time_months[idx],
        outcomes.event[idx],
    )


def tune(
    X,
    outcomes: OutcomeTable,
    space: SearchSpace | None = None,
    n_trials: int = 100,
    n_folds: int = 5,
    seed: int | None = 0,
) -> TuneResult:
    """Seeded random search maximizing mean cross-validated C-index.

    Folds are stratified on the event indicator and shared by all trials.
    Ties on the score go to the lowest trial index.
    """
    space = space or SearchSpace()
    X = np.asarray(X, dtype=float)
    folds = stratified_folds(outcomes.event, n_folds, seed, strict=False)
    rng = np.random.default_rng(seed)
    trials = []
    best_i, best_score = -1, -np.inf
    for i in range(n_trials):
        params = space.sample(rng)
        score = cv_score(X, outcomes, params, folds)
        trials.append({"trial": i, **params, "cv_cindex": score})
        if score > best_score:
            best_i, best_score = i, score
    best = {k: trials[best_i][k] for k in ("penalty", "l1_ratio", "pca_k")}
    return TuneResult(best, float(best_score), trials, seed, n_trials, n_folds)
