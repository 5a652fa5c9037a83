import numpy as np
import pytest
from conftest import flood_fill
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsurv.cac import agatston, candidate_mask, density_weight, label_components_2d
from ctsurv.dataio import Mask, Volume
from ctsurv.synth import Lesion, gen_cac_phantom, random_phantom


def _pair(hu, mask=None, spacing=(1.0, 1.0, 3.0)):
    hu = np.asarray(hu, dtype=np.float32)
    if mask is None:
        mask = np.ones(hu.shape, bool)
    return Volume(hu, spacing), Mask(mask, spacing)


def test_candidate_threshold_inclusive():
    v, m = _pair(np.full((1, 3, 3), 100.0))
    assert not candidate_mask(v, m).data.any()
    hu = np.full((1, 3, 3), 100.0)
    hu[0, 1, 1] = 130.0
    hu[0, 0, 0] = 129.9
    c = candidate_mask(*_pair(hu)).data
    assert c[0, 1, 1] and not c[0, 0, 0] and c.sum() == 1


def test_candidate_respects_mask_and_grid():
    hu = np.full((1, 2, 2), 500.0)
    m = np.zeros((1, 2, 2), bool)
    m[0, 0, 0] = True
    assert candidate_mask(*_pair(hu, m)).data.sum() == 1
    with pytest.raises(ValueError):
        candidate_mask(Volume(hu, (1, 1, 1)), Mask(m, (1, 1, 2)))


def test_components_connectivity():
    diag = np.array([[1, 0], [0, 1]])
    assert label_components_2d(diag)[1] == 1
    gap = np.array([[1, 0, 1]])
    labels, n = label_components_2d(gap)
    assert n == 2 and labels.tolist() == [[1, 0, 2]]


def test_components_raster_order():
    m = np.zeros((5, 5), bool)
    m[4, 0] = True  # encountered last in raster order
    m[0, 3] = True
    m[0, 4] = False
    m[2, 2] = True
    labels, n = label_components_2d(m)
    assert n == 3
    assert labels[0, 3] == 1 and labels[2, 2] == 2 and labels[4, 0] == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.6))
def test_components_match_flood_fill(seed, density):
    m = np.random.default_rng(seed).uniform(size=(64, 64)) < density
    labels, n = label_components_2d(m)
    got = {frozenset(map(tuple, np.argwhere(labels == k))) for k in range(1, n + 1)}
    oracle = flood_fill(m)
    assert got == set(oracle)
    # raster-order numbering: label k's first voxel precedes label k+1's
    firsts = [np.flatnonzero(labels.ravel() == k)[0] for k in range(1, n + 1)]
    assert firsts == sorted(firsts)


@pytest.mark.parametrize(
    "hu,w", [(130, 1), (150, 1), (199.9, 1), (200, 2), (299, 2), (300, 3), (399, 3), (400, 4), (1500, 4)]
)
def test_density_weight(hu, w):
    assert density_weight(hu) == w


def test_density_weight_below_threshold():
    with pytest.raises(ValueError):
        density_weight(129.99)


def test_empty_mask_scores_zero():
    v, m = _pair(np.full((2, 4, 4), 500.0), np.zeros((2, 4, 4), bool))
    rep = agatston(v, m)
    assert rep.total_score == 0.0 and rep.lesions == []


def test_four_voxel_lesion_320():
    hu = np.full((1, 6, 6), -50.0)
    hu[0, 2:4, 2:4] = [[200, 250], [320, 180]]
    rep = agatston(*_pair(hu))
    assert len(rep.lesions) == 1
    les = rep.lesions[0]
    assert (les.voxel_count, les.area_mm2, les.peak_hu, les.weight) == (4, 4.0, 320.0, 3)
    assert rep.total_score == 12.0


def test_subthreshold_area_excluded():
    hu = np.full((1, 5, 5), -50.0)
    hu[0, 2, 2] = 600
    rep = agatston(*_pair(hu, spacing=(0.8, 0.8, 3.0)))
    assert rep.total_score == 0.0 and rep.lesions == []


def test_exactly_one_mm2_kept():
    hu = np.full((1, 5, 5), -50.0)
    hu[0, 2, 2] = 600
    rep = agatston(*_pair(hu, spacing=(1.0, 1.0, 3.0)))
    assert rep.total_score == 4.0


def test_two_slices_additive():
    hu = np.full((2, 6, 6), -50.0)
    hu[0, 0:2, 0:3] = 150  # 6 mm^2 x 1
    hu[1, 3:6, 3:4] = 250  # 3 mm^2 x 2
    rep = agatston(*_pair(hu))
    assert [l.score for l in rep.lesions] == [6.0, 6.0]
    assert rep.total_score == 12.0


def test_no_merge_across_slices():
    hu = np.full((2, 3, 3), -50.0)
    hu[:, 1, 1] = 300
    rep = agatston(*_pair(hu))
    assert len(rep.lesions) == 2


def test_spacing_scale_consistency():
    rng = np.random.default_rng(7)
    lesions, _ = random_phantom(rng, max_lesions=6)
    v, m, _ = gen_cac_phantom(lesions, spacing=(0.5, 0.5, 3.0))
    base = agatston(v, m)
    v2, m2, _ = gen_cac_phantom(lesions, spacing=(1.0, 0.5, 3.0))  # pixel area doubled
    doubled = agatston(v2, m2)
    big = [l for l in base.lesions]
    for a in big:
        match = [b for b in doubled.lesions if b.slice_index == a.slice_index and b.voxel_count == a.voxel_count]
        assert any(b.area_mm2 == 2 * a.area_mm2 for b in match)


def test_monotone_in_added_voxel():
    hu = np.full((1, 6, 6), -50.0)
    hu[0, 2:4, 2:4] = 250
    before = agatston(*_pair(hu)).total_score
    hu[0, 4, 2] = 140
    assert agatston(*_pair(hu)).total_score >= before


def test_phantom_generator_examples():
    _, _, e = gen_cac_phantom([])
    assert e == 0.0
    v, m, e = gen_cac_phantom([Lesion(0, 5, 5, 2, 2, 250.0)])
    assert e == 8.0 and agatston(v, m).total_score == 8.0
    lesions = [Lesion(0, 1, 1, 2, 2, 150.0), Lesion(1, 1, 1, 1, 3, 450.0), Lesion(3, 10, 10, 3, 3, 320.0)]
    v, m, e = gen_cac_phantom(lesions)
    assert e == 4.0 + 12.0 + 27.0 == agatston(v, m).total_score
    with pytest.raises(ValueError):
        gen_cac_phantom([Lesion(0, 1, 1, 2, 2, 150.0), Lesion(0, 3, 3, 2, 2, 150.0)])  # diagonal touch


def test_random_phantoms_match_generator():
    rng = np.random.default_rng(11)
    for _ in range(200):
        lesions, spacing = random_phantom(rng)
        v, m, expected = gen_cac_phantom(lesions, spacing=spacing)
        assert agatston(v, m).total_score == expected
