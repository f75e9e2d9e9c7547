"""Rigid, affine and smooth deformable warps applied jointly to images and labels.

All transforms are pull-backs: an output pixel at (row, col) samples the input
at ``matrix @ (row, col, 1) + displacement[:, row, col]``. Linear parts act
about the image centre.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ShapeError
from .phantom import LabeledVolume

KINDS = ("rigid", "affine", "deformable")

# coordinates this close to an integer are snapped, so exact grid
# permutations (e.g. 90 degree turns) reproduce pixels bit-for-bit
_SNAP = 1e-9


@dataclass(frozen=True)
class AugmentLimits:
    rotation_deg: float = 15.0
    translation_px: float = 10.0
    scale: float = 0.1
    shear: float = 0.1
    displacement_px: float = 8.0
    smoothing_sigma: float = 12.0


@dataclass
class Transform2D:
    kind: str
    shape: tuple[int, int]
    matrix: np.ndarray
    displacement: np.ndarray | None = None
    smoothing_sigma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown transform kind {self.kind!r}")
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (2, 3):
            raise ShapeError(f"matrix must be 2x3, got {self.matrix.shape}")
        if self.kind == "rigid":
            det = np.linalg.det(self.matrix[:, :2])
            rot = self.matrix[:, :2]
            if abs(det - 1) > 1e-9 or not np.allclose(rot @ rot.T, np.eye(2), atol=1e-9):
                raise ConfigurationError("rigid transform needs an orthonormal rotation block")
        if self.displacement is not None:
            if self.displacement.shape != (2, *self.shape):
                raise ShapeError(
                    f"displacement {self.displacement.shape} does not match {self.shape}"
                )


def _about_center(linear: np.ndarray, shift, shape) -> np.ndarray:
    c = (np.array(shape, dtype=np.float64) - 1) / 2
    offset = c - linear @ c + np.asarray(shift, dtype=np.float64)
    return np.hstack([linear, offset[:, None]])


def rotation(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def rigid(angle_deg: float, shift, shape) -> Transform2D:
    return Transform2D("rigid", tuple(shape), _about_center(rotation(angle_deg), shift, shape))


def identity(shape) -> Transform2D:
    return rigid(0.0, (0.0, 0.0), shape)


def sample_transform(kind: str, seed: int, limits: AugmentLimits, shape) -> Transform2D:
    """Draw a transform with every parameter uniform within ``limits``."""
    if kind not in KINDS:
        raise ConfigurationError(f"unknown transform kind {kind!r}; expected one of {KINDS}")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)

    def u(bound, size=None):
        return rng.uniform(-bound, bound, size=size)

    if kind == "deformable":
        mag = rng.uniform(0.0, limits.displacement_px)
        field = rng.standard_normal((2, *shape))
        field = np.stack([ndimage.gaussian_filter(c, limits.smoothing_sigma, mode="reflect") for c in field])
        peak = np.sqrt((field**2).sum(axis=0)).max()
        field = field * (mag / peak) if peak > 0 and mag > 0 else np.zeros_like(field)
        return Transform2D(kind, shape, identity(shape).matrix, field, limits.smoothing_sigma)

    angle = u(limits.rotation_deg)
    shift = u(limits.translation_px, size=2)
    if kind == "rigid":
        return rigid(angle, shift, shape)
    scale = np.diag(1.0 + u(limits.scale, size=2))
    shear = np.array([[1.0, u(limits.shear)], [0.0, 1.0]])
    linear = rotation(angle) @ shear @ scale
    return Transform2D(kind, shape, _about_center(linear, shift, shape))


def _source_coords(t: Transform2D, shape) -> np.ndarray:
    if tuple(shape) != tuple(t.shape):
        raise ShapeError(f"image {tuple(shape)} does not match transform {t.shape}")
    grid = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    coords = np.einsum("ij,jhw->ihw", t.matrix[:, :2], grid) + t.matrix[:, 2, None, None]
    if t.displacement is not None:
        coords = coords + t.displacement
    snapped = np.round(coords)
    return np.where(np.abs(coords - snapped) < _SNAP, snapped, coords)


def warp_image(img: np.ndarray, t: Transform2D) -> np.ndarray:
    """Bilinear resampling; samples outside the grid read as 0."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2D image, got {img.shape}")
    coords = _source_coords(t, img.shape)
    out = ndimage.map_coordinates(img.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
    return out.astype(img.dtype, copy=False) if np.issubdtype(img.dtype, np.floating) else out


def warp_labels(labels: np.ndarray, t: Transform2D) -> np.ndarray:
    """Nearest-neighbour resampling, so no new classes can appear."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"expected a 2D label map, got {labels.shape}")
    coords = _source_coords(t, labels.shape)
    out = ndimage.map_coordinates(labels, coords, order=0, mode="constant", cval=0)
    return out.astype(labels.dtype, copy=False)


def augment_volume(v: LabeledVolume, t: Transform2D) -> LabeledVolume:
    """Warp every slice of ``v`` with the same in-plane transform."""
    imgs = np.stack([warp_image(s, t) for s in v.intensities])
    labs = np.stack([warp_labels(s, t) for s in v.labels])
    return replace(v, intensities=imgs, labels=labs)


def augment_corpus(volumes, per_volume: int, seed: int, limits: AugmentLimits | None = None):
    """``per_volume`` warped copies of each volume, cycling through the three kinds."""
    limits = limits or AugmentLimits()
    seeds = np.random.SeedSequence(seed).generate_state(max(1, len(volumes) * per_volume))
    out = []
    for i, v in enumerate(volumes):
        for k in range(per_volume):
            j = i * per_volume + k
            t = sample_transform(KINDS[j % 3], int(seeds[j]), limits, v.shape[1:])
            out.append(augment_volume(v, t))
    return out
