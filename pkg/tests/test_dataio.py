import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsurv.dataio import (
    FeatureTable,
    Mask,
    OutcomeTable,
    TableSchema,
    Volume,
    align_cohort,
    check_grid,
    load_feature_table,
    load_outcomes,
    load_volume,
    save_feature_table,
    save_volume,
    spacing_filter,
    spacing_reference,
)


def test_load_feature_table_with_batch(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("id,b,f1,f2\nP1,X,1.0,2\nP2,Y,3,4\nP3,X,5,6e1\n")
    t = load_feature_table(p, TableSchema(batch_column="b"))
    assert t.n_subjects == 3 and t.n_features == 2
    assert t.feature_names == ("f1", "f2")
    assert t.batch == ("X", "Y", "X")
    assert t.values[2, 1] == 60.0


def test_duplicate_id_rejected(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("id,f1\nP1,1\nP1,2\n")
    with pytest.raises(ValueError, match="duplicate"):
        load_feature_table(p)


def test_blank_cell_is_missing_not_zero(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("id,f1,f2\nP1,,2\nP2,3,4\n")
    t = load_feature_table(p)
    assert t.n_missing == 1
    assert np.isnan(t.values[0, 0])


def test_non_numeric_and_empty(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("id,f1\nP1,abc\n")
    with pytest.raises(ValueError, match="non-numeric"):
        load_feature_table(p)
    p.write_text("id,f1\n")
    with pytest.raises(ValueError, match="empty"):
        load_feature_table(p)


def test_feature_table_round_trip(tmp_path):
    t = FeatureTable(("a", "b"), ("f",), np.array([[0.1], [np.nan]]), ("X", "Y"))
    save_feature_table(t, tmp_path / "t.csv", batch_column="site")
    back = load_feature_table(tmp_path / "t.csv", TableSchema(batch_column="site"))
    assert back.batch == t.batch
    np.testing.assert_array_equal(back.values, t.values)


def test_load_outcomes(tmp_path):
    p = tmp_path / "o.csv"
    p.write_text("id,time_months,event\nA,12.0,1\nB,30.5,0\n")
    o = load_outcomes(p)
    assert len(o) == 2 and o.event.tolist() == [1, 0]
    p.write_text("id,time_months,event\nC,-1,1\n")
    with pytest.raises(ValueError):
        load_outcomes(p)
    p.write_text("id,time_months,event\nD,5,2\n")
    with pytest.raises(ValueError):
        load_outcomes(p)


def test_volume_round_trip(tmp_path):
    # x fastest: dims (nx, ny, nz) = (2, 2, 1)
    v = Volume(np.array([0, 100, -50, 130], dtype=np.int16).reshape(1, 2, 2), (0.7, 0.7, 1.0))
    save_volume(v, tmp_path / "v.json")
    back = load_volume(tmp_path / "v.json")
    assert back.dims == (2, 2, 1)
    assert back.data.dtype == np.int16
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == (0.7, 0.7, 1.0)
    raw = (tmp_path / "v.raw").read_bytes()
    assert np.frombuffer(raw, "<i2").tolist() == [0, 100, -50, 130]


def test_volume_size_mismatch(tmp_path):
    header = {"dims": [2, 2, 2], "spacing_mm": [1, 1, 1], "dtype": "i16", "data": "v.raw"}
    (tmp_path / "v.json").write_text(json.dumps(header))
    (tmp_path / "v.raw").write_bytes(np.zeros(4, "<i2").tobytes())
    with pytest.raises(ValueError, match="size mismatch"):
        load_volume(tmp_path / "v.json")
    header["dtype"] = "f64"
    (tmp_path / "v.json").write_text(json.dumps(header))
    with pytest.raises(ValueError, match="unsupported"):
        load_volume(tmp_path / "v.json")


@settings(max_examples=25, deadline=None)
@given(
    st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
    st.tuples(*[st.floats(0.1, 5.0, allow_nan=False)] * 3),
    st.sampled_from(["i16", "f32"]),
    st.integers(0, 2**31 - 1),
)
def test_volume_round_trip_property(tmp_path_factory, shape, spacing, dtype, seed):
    d = tmp_path_factory.mktemp("vol")
    rng = np.random.default_rng(seed)
    data = rng.integers(-1024, 3000, shape).astype(np.int16 if dtype == "i16" else np.float32)
    if dtype == "f32":
        data += rng.uniform(size=shape).astype(np.float32)
    save_volume(Volume(data, spacing), d / "v.json", dtype)
    back = load_volume(d / "v.json")
    assert back.data.tobytes() == data.tobytes()
    assert back.spacing == tuple(float(s) for s in spacing)


def test_mask_grid_check():
    v = Volume(np.zeros((2, 3, 4)), (1.0, 1.0, 2.0))
    check_grid(v, Mask(np.ones((2, 3, 4)), (1.0, 1.0, 2.0 * (1 + 1e-8))))
    with pytest.raises(ValueError):
        check_grid(v, Mask(np.ones((2, 3, 4)), (1.0, 1.0, 2.1)))
    with pytest.raises(ValueError):
        check_grid(v, Mask(np.ones((2, 3, 3)), (1.0, 1.0, 2.0)))


def _ft(ids):
    return FeatureTable(tuple(ids), ("f",), np.arange(len(ids), dtype=float)[:, None])


def _ot(ids):
    return OutcomeTable(tuple(ids), np.arange(1, len(ids) + 1, dtype=float), np.ones(len(ids)))


def test_align_cohort():
    f, o, dropped = align_cohort(_ft("ABC"), _ot("BCD"))
    assert f.subject_ids == o.subject_ids == ("B", "C")
    assert dropped == {"features": ["A"], "outcomes": ["D"]}
    f, o, dropped = align_cohort(_ft("ABC"), _ot("CAB"))
    assert f.subject_ids == o.subject_ids
    assert dropped == {"features": [], "outcomes": []}
    with pytest.raises(ValueError):
        align_cohort(_ft("AB"), _ot("CD"))


def test_spacing_filter_identical():
    sp = [(0.7, 0.7, 1.0)] * 4
    res = spacing_filter("abcd", sp, spacing_reference(sp))
    assert res.excluded == [] and res.kept == list("abcd")


def test_spacing_filter_derived_threshold():
    z = [1.0] * 9 + [5.0]
    sp = [(0.7, 0.7, s) for s in z]
    mean, sd = spacing_reference(sp)
    # direct arithmetic: mean 1.4, population SD sqrt((9*0.16 + 12.96)/10) = 1.2
    assert mean[2] == pytest.approx(1.4)
    assert sd[2] == pytest.approx(1.2)
    res = spacing_filter(range(10), sp, (mean, sd))
    assert res.thresholds[2] == pytest.approx(3.8)
    assert res.excluded == [9]


def test_spacing_filter_boundary_kept():
    res = spacing_filter(["a", "b"], [(1, 1, 3.8), (1, 1, 3.81)], (np.array([1, 1, 1.4]), np.array([0, 0, 1.2])))
    assert res.kept == ["a"] and res.excluded == ["b"]


def test_spacing_filter_empty():
    res = spacing_filter([], np.zeros((0, 3)), (np.ones(3), np.zeros(3)))
    assert res.kept == [] and res.excluded == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.5, 5.0), min_size=2, max_size=12), st.integers(0, 11), st.floats(0.0, 3.0))
def test_spacing_filter_monotone(z, who, bump):
    who = who % len(z)
    stats = spacing_reference([(1, 1, s) for s in z])
    before = spacing_filter(range(len(z)), [(1, 1, s) for s in z], stats)
    z2 = list(z)
    z2[who] += bump
    after = spacing_filter(range(len(z)), [(1, 1, s) for s in z2], stats)
    others_before = [i for i in before.excluded if i != who]
    others_after = [i for i in after.excluded if i != who]
    assert others_before == others_after
