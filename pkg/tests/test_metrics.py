import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from srscn.errors import ShapeError, UndefinedMetricError
from srscn.metrics import (
    CSV_COLUMNS,
    asd,
    asd_bruteforce,
    dice_binary,
    evaluate_case,
    extract_boundary,
    extract_boundary_bruteforce,
    hausdorff,
    hausdorff_bruteforce,
    mean_sd,
    reports_to_csv,
)


def block(shape, rows, cols):
    m = np.zeros(shape, bool)
    m[rows, cols] = True
    return m


def point(shape, *idx):
    m = np.zeros(shape, bool)
    m[idx] = True
    return m


# --- Dice --------------------------------------------------------------------


def test_dice_hand_counted():
    a = block((4, 4), slice(1, 3), slice(0, 2))
    b = block((4, 4), slice(1, 3), slice(1, 3))
    assert dice_binary(a, a) == 1.0
    assert dice_binary(a, ~a) == 0.0
    assert dice_binary(a, b) == 0.5
    assert dice_binary(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_binary(np.zeros((3, 3)), np.zeros((3, 4)))


# --- boundaries ------------------------------------------------------------------


def test_boundary_cases():
    single = point((5, 5), 2, 2)
    np.testing.assert_array_equal(extract_boundary(single), single)
    full = block((6, 6), slice(1, 5), slice(1, 5))
    assert extract_boundary(full).sum() == 12
    assert not extract_boundary(np.zeros((4, 4), bool)).any()
    # grid border counts as background
    assert extract_boundary(np.ones((3, 3), bool)).sum() == 8


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_boundary_matches_neighbor_scan(seed, three_d):
    rng = np.random.default_rng(seed)
    shape = (5, 7, 6) if three_d else (11, 9)
    m = rng.random(shape) < 0.5
    np.testing.assert_array_equal(extract_boundary(m), extract_boundary_bruteforce(m))


# --- distances -----------------------------------------------------------------


def test_identical_masks_have_zero_distance():
    m = block((8, 8), slice(2, 6), slice(1, 5))
    assert asd(m, m) == 0.0
    assert hausdorff(m, m) == 0.0
    assert hausdorff(m, m, mode="directed") == 0.0


def test_single_pixels():
    a, b = point((8, 8), 1, 1), point((8, 8), 1, 4)
    assert asd(a, b) == 3.0
    assert asd_bruteforce(a, b) == 3.0
    assert asd(a, b, spacing=(1.0, 2.0)) == 6.0
    c = point((8, 8), 4, 5)
    assert hausdorff(a, c) == 5.0
    assert hausdorff_bruteforce(a, c) == 5.0


def test_subset_is_asymmetric():
    gs = block((10, 10), slice(1, 9), slice(1, 9))
    seg = block((10, 10), slice(3, 6), slice(3, 6))
    assert hausdorff(seg, gs, mode="directed") == 0.0
    assert hausdorff(gs, seg, mode="directed") > 0.0
    assert hausdorff(seg, gs) > 0.0


def test_empty_masks_are_undefined():
    m = point((4, 4), 1, 1)
    with pytest.raises(UndefinedMetricError):
        asd(m, np.zeros_like(m))
    with pytest.raises(UndefinedMetricError):
        hausdorff(np.zeros_like(m), m)


def _random_pair(rng, max_side=32):
    h, w = rng.integers(1, max_side + 1, size=2)
    while True:
        a = rng.random((h, w)) < rng.uniform(0.02, 0.7)
        b = rng.random((h, w)) < rng.uniform(0.02, 0.7)
        if a.any() and b.any():
            return a, b, tuple(rng.uniform(0.25, 4.0, size=2))


@pytest.mark.parametrize("seed", range(40))
def test_fast_path_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    a, b, sp = _random_pair(rng)
    assert abs(asd(a, b, sp) - asd_bruteforce(a, b, sp)) <= 1e-9
    for mode in ("directed", "symmetric"):
        assert abs(hausdorff(a, b, sp, mode) - hausdorff_bruteforce(a, b, sp, mode)) <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_symmetry_and_homogeneity(seed):
    rng = np.random.default_rng(100 + seed)
    a, b, sp = _random_pair(rng)
    assert asd(a, b, sp) == pytest.approx(asd(b, a, sp), abs=1e-12)
    assert hausdorff(a, b, sp) == hausdorff(b, a, sp)
    c = 2.5
    scaled = tuple(c * s for s in sp)
    assert asd(a, b, scaled) == pytest.approx(c * asd(a, b, sp), rel=1e-12)
    assert hausdorff(a, b, scaled) == pytest.approx(c * hausdorff(a, b, sp), rel=1e-12)


def test_directed_witness_exists():
    rng = np.random.default_rng(5)
    found = False
    for _ in range(20):
        a, b, sp = _random_pair(rng, 16)
        if hausdorff(a, b, sp, "directed") != hausdorff(b, a, sp, "directed"):
            found = True
            break
    assert found


def test_dilating_gs_drives_directed_hd_to_zero():
    rng = np.random.default_rng(9)
    seg = rng.random((20, 20)) < 0.1
    gs = rng.random((20, 20)) < 0.1
    for _ in range(40):
        if hausdorff(seg, gs, mode="directed") == 0.0:
            break
        gs = ndimage.binary_dilation(gs)
    assert np.all(gs[seg])
    assert hausdorff(seg, gs, mode="directed") == 0.0


def test_3d_anisotropic_against_bruteforce():
    rng = np.random.default_rng(3)
    a = rng.random((4, 9, 9)) < 0.3
    b = rng.random((4, 9, 9)) < 0.3
    sp = (10.0, 1.5, 1.5)
    assert asd(a, b, sp) == pytest.approx(asd_bruteforce(a, b, sp), abs=1e-9)
    assert hausdorff(a, b, sp) == pytest.approx(hausdorff_bruteforce(a, b, sp), abs=1e-9)


# --- case report ----------------------------------------------------------------


def test_identical_case(phantom):
    rep = evaluate_case(phantom.labels, phantom.labels, phantom.spacing)
    assert list(rep.structures) == ["Myo", "LV", "RV"]
    for m in rep.structures.values():
        assert m.dice == 1.0 and m.asd_mm == 0.0 and m.hd_mm == 0.0 and not m.flags


def test_empty_structure_is_flagged():
    gt = np.zeros((2, 8, 8), np.uint8)
    gt[:, 2:5, 2:5] = 1
    rep = evaluate_case(gt, gt, (1, 1, 1))
    rv = rep.structures["RV"]
    assert rv.dice == 1.0 and rv.asd_mm is None and rv.hd_mm is None
    assert rv.flags == ["empty_both"]
    pred = gt.copy()
    pred[0, 6, 6] = 2
    assert evaluate_case(pred, gt, (1, 1, 1)).structures["RV"].flags == ["empty_gt"]


def test_report_field_names(phantom):
    rep = evaluate_case(phantom.labels, phantom.labels, phantom.spacing, case_id="c0")
    body = json.loads(rep.to_json())
    assert set(body["structures"]) == {"Myo", "LV", "RV"}
    for m in body["structures"].values():
        assert {"Dice", "ASD", "HD"} <= set(m)
    rows = list(csv.reader(io.StringIO(reports_to_csv([rep]))))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 4


def test_mean_sd_uses_sample_convention():
    m, s = mean_sd([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5
    assert s == pytest.approx(np.std([1, 2, 3, 4], ddof=1), abs=1e-15)
