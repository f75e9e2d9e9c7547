import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srscn.augment import (
    KINDS,
    AugmentLimits,
    Transform2D,
    augment_corpus,
    augment_volume,
    identity,
    rigid,
    sample_transform,
    warp_image,
    warp_labels,
)
from srscn.errors import ConfigurationError, ShapeError
from srscn.metrics import extract_boundary

ZERO = AugmentLimits(0, 0, 0, 0, 0, 12.0)


def rot90_oracle(img):
    """out[r, c] = img[W-1-c, r], written out index by index."""
    h, w = img.shape
    out = np.empty_like(img)
    for r in range(h):
        for c in range(w):
            out[r, c] = img[w - 1 - c, r]
    return out


@pytest.mark.parametrize("kind", KINDS)
def test_zero_limits_give_identity(kind, rng):
    t = sample_transform(kind, 3, ZERO, (32, 32))
    np.testing.assert_array_equal(t.matrix, identity((32, 32)).matrix)
    if t.displacement is not None:
        assert not t.displacement.any()
    img = rng.random((32, 32))
    np.testing.assert_array_equal(warp_image(img, t), img)


@pytest.mark.parametrize("kind", KINDS)
def test_sampling_is_deterministic(kind):
    a = sample_transform(kind, 11, AugmentLimits(), (48, 48))
    b = sample_transform(kind, 11, AugmentLimits(), (48, 48))
    np.testing.assert_array_equal(a.matrix, b.matrix)
    if a.displacement is not None:
        np.testing.assert_array_equal(a.displacement, b.displacement)


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        sample_transform("projective", 0, AugmentLimits(), (8, 8))


@pytest.mark.parametrize("seed", range(20))
def test_rigid_matrix_is_a_rotation(seed):
    t = sample_transform("rigid", seed, AugmentLimits(), (64, 64))
    rot = t.matrix[:, :2]
    assert abs(np.linalg.det(rot) - 1) < 1e-9
    np.testing.assert_allclose(rot @ rot.T, np.eye(2), atol=1e-12)
    assert np.all(np.abs(t.matrix[:, 2] - (np.eye(2) - rot) @ [31.5, 31.5]) <= 10 + 1e-9)


def test_bad_rigid_matrix_rejected():
    with pytest.raises(ConfigurationError):
        Transform2D("rigid", (8, 8), [[2, 0, 0], [0, 1, 0]])


@pytest.mark.parametrize("seed", range(20))
def test_deformable_magnitude_within_limit(seed):
    lim = AugmentLimits()
    t = sample_transform("deformable", seed, lim, (64, 64))
    norms = np.sqrt((t.displacement**2).sum(axis=0))
    assert norms.max() <= lim.displacement_px + 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_deformable_field_does_not_fold(seed):
    t = sample_transform("deformable", seed, AugmentLimits(), (64, 64))
    dy, dx = t.displacement
    # Jacobian of (row, col) -> (row + dy, col + dx), central differences
    j11 = 1 + (dy[2:, 1:-1] - dy[:-2, 1:-1]) / 2
    j12 = (dy[1:-1, 2:] - dy[1:-1, :-2]) / 2
    j21 = (dx[2:, 1:-1] - dx[:-2, 1:-1]) / 2
    j22 = 1 + (dx[1:-1, 2:] - dx[1:-1, :-2]) / 2
    assert np.all(j11 * j22 - j12 * j21 > 0)


def test_identity_warp(rng):
    img = rng.random((20, 24))
    lab = rng.integers(0, 4, (20, 24)).astype(np.uint8)
    np.testing.assert_array_equal(warp_image(img, identity((20, 24))), img)
    np.testing.assert_array_equal(warp_labels(lab, identity((20, 24))), lab)


@pytest.mark.parametrize("n", [4, 7, 16])
def test_quarter_turn_is_a_permutation(n, rng):
    img = rng.random((n, n))
    lab = rng.integers(0, 4, (n, n)).astype(np.uint8)
    t = rigid(90.0, (0, 0), (n, n))
    np.testing.assert_array_equal(warp_image(img, t), rot90_oracle(img))
    np.testing.assert_array_equal(warp_labels(lab, t), rot90_oracle(lab))


def test_half_pixel_shift_of_constant():
    img = np.full((16, 16), 0.7)
    out = warp_image(img, rigid(0.0, (0.5, 0.0), (16, 16)))
    np.testing.assert_allclose(out[:-1], 0.7, rtol=0, atol=1e-15)
    # the last row samples beyond the grid
    assert np.all(out[-1] == 0)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        warp_image(np.zeros((8, 9)), identity((8, 8)))
    with pytest.raises(ShapeError):
        warp_labels(np.zeros((8, 8, 2)), identity((8, 8)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(KINDS),
       present=st.sets(st.integers(0, 3), min_size=1))
def test_no_new_classes(seed, kind, present):
    rng = np.random.default_rng(seed)
    lab = rng.choice(sorted(present), size=(32, 32)).astype(np.uint8)
    out = warp_labels(lab, sample_transform(kind, seed, AugmentLimits(), (32, 32)))
    assert set(np.unique(out)) <= present | {0}


@pytest.mark.parametrize("seed", range(10))
def test_rigid_area_change_bounded(seed, phantom):
    lim = AugmentLimits()
    t = sample_transform("rigid", seed, lim, phantom.shape[1:])
    for lab in phantom.labels[::3]:
        fg = lab > 0
        out = warp_labels(lab, t) > 0
        perimeter = extract_boundary(fg).sum()
        assert abs(int(out.sum()) - int(fg.sum())) <= perimeter + 4 * lim.translation_px


def test_augment_volume_keeps_positions(phantom):
    t = sample_transform("affine", 5, AugmentLimits(), phantom.shape[1:])
    out = augment_volume(phantom, t)
    assert out.shape == phantom.shape
    np.testing.assert_array_equal(out.slice_positions, phantom.slice_positions)
    assert out.spacing == phantom.spacing


def test_augment_corpus_cycles_kinds(phantom):
    out = augment_corpus([phantom], per_volume=3, seed=0)
    assert len(out) == 3
    assert all(o != phantom for o in out)
    again = augment_corpus([phantom], per_volume=3, seed=0)
    assert all(a == b for a, b in zip(out, again))
