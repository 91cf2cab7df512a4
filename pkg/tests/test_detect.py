import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from segkit.detect import (BoundingBox2D, DetectParams, connected_components, crop_to_tumor,
                           detect_slice, detect_tumor_volume, dilate, equalize_histogram,
                           largest_containing, otsu_threshold, remove_small_objects,
                           run_detection, threshold_slice)
from segkit.errors import (BoundsError, ConfigError, DegenerateHistogramError, NoTumorError)
from segkit.phantom import generate_phantom
from segkit.volume import BoundingBox3D, LabelVolume, MultiModalVolume, Volume3D

from oracles import equalize_naive, flood_fill_components, max_filter_naive, otsu_exhaustive

masks = hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                   elements=st.integers(0, 1))


# equalisation -----------------------------------------------------------------

def test_equalize_constant():
    assert not equalize_histogram(np.full((4, 5), 0.3)).any()


def test_equalize_matches_cdf_oracle():
    s = np.random.default_rng(0).random((12, 9)).astype(np.float32)
    np.testing.assert_allclose(equalize_histogram(s, 16), equalize_naive(s, 16), atol=1e-6)


def test_equalize_uniform_histogram_is_near_minmax():
    bins = 8
    s = (np.arange(64) % bins + 0.5).reshape(8, 8) / bins  # 8 per bin, equal mass
    out = equalize_histogram(s, bins)
    mm = (s - s.min()) / (s.max() - s.min())
    assert np.abs(out - mm).max() <= 1.0 / bins + 1e-6


# otsu --------------------------------------------------------------------------

def test_otsu_two_delta():
    s = np.array([0.1] * 50 + [0.9] * 50).reshape(10, 10)
    t = otsu_threshold(s)
    assert 0.1 < t < 0.9


def test_otsu_constant():
    with pytest.raises(DegenerateHistogramError):
        otsu_threshold(np.full((3, 3), 2.0))


@pytest.mark.parametrize("seed", range(8))
def test_otsu_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    s = np.concatenate([rng.normal(0.3, 0.05, 300), rng.normal(0.7, 0.08, 200)]).reshape(20, 25)
    assert otsu_threshold(s, 64) == pytest.approx(otsu_exhaustive(s, 64), abs=1e-9)


# threshold ---------------------------------------------------------------------

def test_threshold_basic():
    np.testing.assert_array_equal(threshold_slice(np.array([[0.4, 0.6]]), 0.5), [[0, 1]])
    s = np.random.default_rng(1).random((6, 6))
    assert not threshold_slice(s, s.max()).any()


def test_threshold_matches_comparison_and_nests():
    s = np.random.default_rng(2).random((9, 11))
    m = threshold_slice(s, 0.4)
    for idx in np.ndindex(s.shape):
        assert m[idx] == (1 if s[idx] > 0.4 else 0)
    assert not (threshold_slice(s, 0.6) & ~m.astype(bool)).any()


# dilation ----------------------------------------------------------------------

def test_dilate_center_pixel():
    m = np.zeros((5, 5), np.uint8)
    m[2, 2] = 1
    out = dilate(m, 1)
    assert out.sum() == 9 and out[1:4, 1:4].all()
    assert not dilate(np.zeros((4, 4)), 2).any()


@pytest.mark.parametrize("seed", range(10))
def test_dilate_matches_max_filter(seed):
    rng = np.random.default_rng(seed)
    m = (rng.random((64, 64)) < 0.05).astype(np.uint8)
    for r in (0, 1, 2, 3):
        np.testing.assert_array_equal(dilate(m, r), max_filter_naive(m, r))


@settings(max_examples=40, deadline=None)
@given(masks, st.integers(0, 3), st.integers(0, 3))
def test_dilate_properties(m, r1, r2):
    out = dilate(m, r1)
    assert (out >= m).all()
    assert (dilate(m, r1 + 1) >= out).all()
    np.testing.assert_array_equal(dilate(dilate(m, r1), r2), dilate(m, r1 + r2))


# components --------------------------------------------------------------------

def test_components_diagonal():
    objs = connected_components(np.array([[1, 0], [0, 1]]))
    assert len(objs) == 1 and objs[0].area == 2
    assert connected_components(np.zeros((3, 3))) == []


def comp_sets(objs):
    return {frozenset(map(tuple, o.coords.tolist())) for o in objs}


def test_components_match_flood_fill_100_masks():
    rng = np.random.default_rng(42)
    for i in range(100):
        m = (rng.random((64, 64)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        objs = connected_components(m)
        assert comp_sets(objs) == set(flood_fill_components(m)), i


def test_components_order_and_boxes():
    m = np.zeros((6, 6), np.uint8)
    m[4, 0] = 1
    m[0, 3:5] = 1
    m[1, 5] = 1
    objs = connected_components(m)
    assert [o.label for o in objs] == [1, 2]
    assert objs[0].bbox == BoundingBox2D((0, 3), (1, 5)) and objs[0].area == 3
    assert objs[1].bbox == BoundingBox2D((4, 0), (4, 0))


@settings(max_examples=40, deadline=None)
@given(masks)
def test_component_invariants(m):
    objs = connected_components(m)
    assert sum(o.area for o in objs) == int(m.sum())
    for o in objs:
        assert 1 <= o.area <= o.bbox.area


# small-object removal ----------------------------------------------------------

def test_remove_small_boundary():
    m = np.zeros((4, 4), np.uint8)
    m[0, 0:3] = 1
    objs = connected_components(m)
    assert not remove_small_objects(objs, m, 4).any()
    np.testing.assert_array_equal(remove_small_objects(objs, m, 3), m)


@settings(max_examples=40, deadline=None)
@given(masks, st.integers(1, 10))
def test_remove_small_keeps_exactly_large_objects(m, thresh):
    objs = connected_components(m)
    out = remove_small_objects(objs, m, thresh)
    assert (out <= m).all()
    expected = {frozenset(map(tuple, o.coords.tolist())) for o in objs if o.area >= thresh}
    assert set(flood_fill_components(out)) == expected


# detect_slice ------------------------------------------------------------------

def square_and_speck():
    s = np.zeros((20, 20), np.float32)
    s[5:11, 5:11] = 1.0
    s[15, 15:17] = 1.0
    return s


def test_detect_slice_square_and_speck_without_dilation():
    boxes = detect_slice(square_and_speck(), DetectParams(area_thresh=9, radius=0))
    assert boxes == [BoundingBox2D((5, 5), (10, 10))]


def test_detect_slice_square_and_speck_with_dilation():
    # dilated speck covers 3x4 = 12 pixels, the square 8x8
    p = DetectParams(area_thresh=13, radius=1)
    assert detect_slice(square_and_speck(), p) == [BoundingBox2D((4, 4), (11, 11))]
    assert len(detect_slice(square_and_speck(), DetectParams(area_thresh=12, radius=1))) == 2


def test_detect_slice_empty_and_two_blobs():
    assert detect_slice(np.zeros((10, 10)), DetectParams(area_thresh=1)) == []
    s = np.zeros((30, 30), np.float32)
    s[2:8, 2:8] = 1
    s[20:27, 18:25] = 1
    boxes = detect_slice(s, DetectParams(area_thresh=9))
    assert boxes == [BoundingBox2D((1, 1), (8, 8)), BoundingBox2D((19, 17), (27, 25))]


def test_detect_slice_otsu_constant_is_empty():
    assert detect_slice(np.full((8, 8), 0.5), DetectParams(mode="otsu", area_thresh=1)) == []


def test_detect_slice_composes_primitives():
    rng = np.random.default_rng(5)
    s = rng.random((32, 32)).astype(np.float32)
    p = DetectParams(thresh=0.8, area_thresh=6, radius=1)
    m = dilate(threshold_slice(s, 0.8), 1)
    expected = [o.bbox for o in connected_components(m) if o.area >= 6]
    assert detect_slice(s, p) == expected


def test_params_validation():
    with pytest.raises(ConfigError):
        DetectParams(area_thresh=0)
    with pytest.raises(ConfigError):
        DetectParams(mode="magic")


# aggregation -------------------------------------------------------------------

def test_largest_containing_hand_trace():
    small = BoundingBox2D((5, 5), (7, 7))
    big = BoundingBox2D((4, 4), (9, 9))
    elsewhere = BoundingBox2D((20, 20), (40, 40))
    assert largest_containing([small, big]) == big
    assert largest_containing([small, elsewhere]) == small
    assert largest_containing([small, elsewhere, big]) == big
    # equal area never replaces
    same = BoundingBox2D((5, 5), (7, 7))
    assert largest_containing([small, same]) is small
    with pytest.raises(NoTumorError):
        largest_containing([])


def test_volume_detection_z_range():
    data = np.zeros((8, 20, 20), np.float32)
    data[2, 5:8, 5:8] = 1
    data[3:6, 4:10, 4:10] = 1
    data[7, 15:19, 15:19] = 1  # disjoint, must not extend z-range
    det = run_detection(Volume3D(data), DetectParams(area_thresh=4, radius=0))
    assert det.box == BoundingBox3D((2, 4, 4), (5, 9, 9))
    assert det.per_slice_counts == [0, 0, 1, 1, 1, 1, 0, 1]


def test_volume_all_zero():
    with pytest.raises(NoTumorError):
        detect_tumor_volume(Volume3D(np.zeros((4, 8, 8))), DetectParams())


def test_report_is_json():
    data = np.zeros((4, 10, 10), np.float32)
    data[1:3, 2:6, 2:6] = 1
    p = DetectParams(area_thresh=4)
    rep = run_detection(Volume3D(data), p).report("c1", p)
    doc = json.loads(json.dumps(rep))
    assert set(doc) == {"case", "bbox", "per_slice_candidates", "params"}
    assert doc["bbox"] == {"min": [1, 1, 1], "max": [2, 6, 6]}


PHANTOM_PARAMS = DetectParams(area_thresh=16)


@pytest.mark.parametrize("seed", range(5))
def test_phantom_detection_covers_blob(seed):
    m, l = generate_phantom(seed, (40, 40, 40), 6, 8)
    box = detect_tumor_volume(m, PHANTOM_PARAMS)
    blob = l.labels > 0
    inside = blob[box.slices].sum()
    assert inside >= 0.99 * blob.sum()


@pytest.mark.parametrize("seed", range(4))
def test_detection_monotone_in_area_thresh_without_specks(seed):
    m, _ = generate_phantom(seed, (32, 32, 32), 6, 0)
    areas = []
    for a in (100, 64, 16, 4, 1):
        box = detect_tumor_volume(m, DetectParams(area_thresh=a))
        areas.append(np.prod(box.shape))
    assert areas == sorted(areas)


# cropping ----------------------------------------------------------------------

def test_crop_to_tumor_identity_and_clamp():
    m, l = generate_phantom(0, (16, 16, 16), 4, 0)
    full = BoundingBox3D.full(m.dims)
    m2, l2 = crop_to_tumor(m, l, full, 0)
    np.testing.assert_array_equal(m2.stack(), m.stack())
    m3, l3 = crop_to_tumor(m, l, BoundingBox3D((1, 1, 1), (14, 14, 14)), 5)
    assert m3.dims == (16, 16, 16) and l3.dims == (16, 16, 16)
    with pytest.raises(BoundsError):
        crop_to_tumor(m, l, BoundingBox3D((0, 0, 0), (16, 3, 3)), 0)


@pytest.mark.parametrize("seed", range(3))
def test_crop_keeps_all_blob_voxels(seed):
    m, l = generate_phantom(seed, (40, 40, 40), 6, 6)
    box = detect_tumor_volume(m, PHANTOM_PARAMS)
    _, lc = crop_to_tumor(m, l, box, margin=PHANTOM_PARAMS.radius)
    assert np.count_nonzero(lc.labels) == np.count_nonzero(l.labels)
