import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsurv.consensus import (
    build_consensus,
    classification_metrics,
    classify_at_horizon,
    consensus_subset,
    ensemble_risk,
    valid_at_horizon,
    youden_threshold,
)


def test_valid_at_horizon_examples():
    valid, truth = valid_at_horizon([30, 40, 61, 60], [1, 0, 0, 1], 60)
    assert valid.tolist() == [True, False, True, True]
    assert truth.tolist() == [1, 0, 0, 1]
    with pytest.raises(ValueError):
        valid_at_horizon([1], [1], 0)


# ---------------------------------------------------------------------------
# Youden threshold


def test_youden_separable():
    s = np.array([0.1, 0.2, 0.5, 0.6])
    y = np.array([1, 1, 0, 0])
    tau, j = youden_threshold(s, y)
    assert j == 1.0 and tau == pytest.approx(0.35)


def test_youden_uninformative():
    tau, j = youden_threshold(np.full(6, 0.4), [1, 0, 1, 0, 1, 0])
    assert j == 0.0
    assert classify_at_horizon(np.full(6, 0.4), tau).tolist() == [0] * 6


def _sweep_oracle(s, y):
    """Every achievable split of the sorted values, scanned directly."""
    vals = sorted(set(s.tolist()))
    pos = sum(y)
    neg = len(y) - pos
    best_j, best_cut = None, None
    candidates = [vals[0] - 1.0] + [(a + b) / 2 for a, b in zip(vals, vals[1:])] + [vals[-1] + 1.0]
    for c in candidates:
        tp = sum(1 for v, l in zip(s, y) if v < c and l == 1)
        tn = sum(1 for v, l in zip(s, y) if v >= c and l == 0)
        j = tp / pos + tn / neg - 1
        if best_j is None or j > best_j:
            best_j, best_cut = j, c
    return best_cut, best_j


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_youden_matches_sweep(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 20, 50) / 20.0
    y = (rng.uniform(size=50) < 0.5 + 0.3 * (0.5 - s)).astype(int)
    y[0], y[1] = 0, 1
    tau, j = youden_threshold(s, y)
    o_tau, o_j = _sweep_oracle(s, y)
    assert j == pytest.approx(o_j, abs=1e-15)
    assert tau == o_tau


def test_youden_single_class():
    with pytest.raises(ValueError, match="both classes"):
        youden_threshold([0.1, 0.2], [1, 1])


# ---------------------------------------------------------------------------
# classification


def test_classify_strict():
    assert classify_at_horizon([0.5], 0.5).tolist() == [0]
    assert classify_at_horizon([0.0], 1e-9).tolist() == [1]
    s = np.array([0.1, 0.5, 0.9, 0.5])
    assert classify_at_horizon(s, 0.5).tolist() == [int(v < 0.5) for v in s]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_classify_monotone_in_tau(s, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = classify_at_horizon(s, lo), classify_at_horizon(s, hi)
    assert np.all(b >= a)


def test_consensus_examples():
    v = np.array([1, 0, 1, 1, 0])
    _, labels, cov = consensus_subset([v, v, v])
    assert cov == 1.0 and labels.tolist() == v.tolist()
    w = v.copy()
    w[2] = 0
    ids, _, cov = consensus_subset([v, w], ids=list("abcde"))
    assert ids == ["a", "b", "d", "e"] and cov == pytest.approx(4 / 5)
    with pytest.raises(ValueError):
        consensus_subset([v])


def test_consensus_brute_force_and_adding_models():
    rng = np.random.default_rng(0)
    L = (rng.uniform(size=(5, 100)) < 0.8).astype(int)
    keep, labels, cov = consensus_subset(L)
    oracle = [i for i in range(100) if len({int(L[m, i]) for m in range(5)}) == 1]
    assert keep.tolist() == oracle
    assert cov == len(oracle) / 100
    for m in range(5):
        np.testing.assert_array_equal(L[m, keep], labels)  # every model equals the consensus there
    covs = [consensus_subset(L[:k])[2] for k in range(2, 6)]
    assert all(b <= a for a, b in zip(covs, covs[1:]))


def test_classification_metrics_examples():
    y = np.array([1, 0, 1, 1, 0])
    m = classification_metrics(y, y)
    assert (m.accuracy, m.sensitivity, m.specificity) == (1.0, 1.0, 1.0)
    assert classification_metrics(1 - y, y).accuracy == 0.0
    truth = np.array([1] * 42 + [0] * 6)
    pred = np.array([1] * 41 + [0] + [0] * 4 + [1] * 2)
    m = classification_metrics(pred, truth)
    assert m.sensitivity == 41 / 42 and round(m.sensitivity, 3) == 0.976
    assert m.specificity == 4 / 6 and round(m.specificity, 3) == 0.667
    assert m.accuracy == 45 / 48
    only_pos = classification_metrics([1, 1], [1, 1])
    assert only_pos.specificity is None


# ---------------------------------------------------------------------------
# ensembles


def test_ensemble_examples():
    v = np.array([1.0, 2.0, 5.0])
    np.testing.assert_array_equal(ensemble_risk([v, v]), v)
    np.testing.assert_allclose(ensemble_risk([v, -v + 4.0]), 2.0)
    rng = np.random.default_rng(1)
    R = rng.lognormal(size=(3, 20))
    got = ensemble_risk(list(R))
    for i in range(20):
        assert got[i] == pytest.approx((R[0, i] + R[1, i] + R[2, i]) / 3, rel=1e-15)


def test_ensemble_zscore_and_errors():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([100.0, 300.0, 200.0])
    z = ensemble_risk([a, b], "zscore", [a, b])
    za = (a - a.mean()) / a.std()
    zb = (b - b.mean()) / b.std()
    np.testing.assert_allclose(z, (za + zb) / 2)
    with pytest.raises(ValueError):
        ensemble_risk([a, b], "zscore")
    with pytest.raises(ValueError):
        ensemble_risk([a, b[:2]])
    with pytest.raises(ValueError):
        ensemble_risk([a])
    with pytest.raises(ValueError):
        ensemble_risk([a, b], "median")


# ---------------------------------------------------------------------------
# end to end


def test_build_consensus():
    rng = np.random.default_rng(2)
    n = 200
    risk = rng.standard_normal(n)
    t = rng.exponential(30 * np.exp(-risk))
    e = (rng.uniform(size=n) < 0.8).astype(int)
    tr, te = slice(0, 120), slice(120, n)
    surv = [np.exp(-np.exp(risk + rng.normal(0, s, n)) * 0.5) for s in (0.2, 0.4)]
    rep = build_consensus(
        ["a", "b"],
        [s[tr] for s in surv],
        [s[te] for s in surv],
        t[tr],
        e[tr],
        t[te],
        e[te],
        horizon=24,
        test_ids=[f"S{i}" for i in range(120, n)],
    )
    valid, _ = valid_at_horizon(t[te], e[te], 24)
    assert rep.n_valid == int(valid.sum())
    assert rep.coverage == pytest.approx(len(rep.subset_ids) / rep.n_valid)
    assert 0 <= rep.consensus.accuracy <= 1
    d = rep.to_dict()
    assert set(d["thresholds"]) == {"a", "b"} and d["n_consensus"] == len(rep.subset_ids)
    # labels on the subset are shared by both models
    idx = [int(s[1:]) - 120 for s in rep.subset_ids]
    la = classify_at_horizon(surv[0][te][idx], rep.thresholds["a"])
    lb = classify_at_horizon(surv[1][te][idx], rep.thresholds["b"])
    assert la.tolist() == lb.tolist()
