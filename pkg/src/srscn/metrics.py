"""Dice, average symmetric surface distance and Hausdorff distance.

Distances are Euclidean in millimetres with per-axis spacing. The fast paths
use an exact Euclidean distance transform; the ``*_bruteforce`` functions
compare every point pair and serve as the reference.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError, UndefinedMetricError
from .phantom import LV, MYO, RV

# reporting order and class ids; the names match the rows of the results table
STRUCTURES = {"Myo": MYO, "LV": LV, "RV": RV}
METRIC_NAMES = ("Dice", "ASD", "HD")
CSV_COLUMNS = ("case_id", "structure", "dice", "asd_mm", "hd_mm", "flags")


def _spacing(mask, spacing):
    if spacing is None:
        return (1.0,) * mask.ndim
    if np.isscalar(spacing):
        spacing = (float(spacing),) * mask.ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != mask.ndim or min(spacing) <= 0:
        raise ShapeError(f"spacing {spacing} does not fit a {mask.ndim}D mask")
    return spacing


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("empty grid")
    return a, b


def dice_binary(a, b) -> float:
    a, b = _pair(a, b)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def extract_boundary(mask) -> np.ndarray:
    """Foreground voxels with a face neighbour in the background (or off-grid)."""
    mask = np.asarray(mask, dtype=bool)
    cross = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, cross, border_value=0)


def boundary_points(mask, spacing=None) -> np.ndarray:
    """Boundary coordinates in mm, shape (K, ndim)."""
    mask = np.asarray(mask, dtype=bool)
    return np.argwhere(extract_boundary(mask)) * np.asarray(_spacing(mask, spacing))


def _dist_to(target: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from every voxel to the nearest ``target`` voxel."""
    return ndimage.distance_transform_edt(~target, sampling=spacing)


def _require_nonempty(*masks):
    if any(not m.any() for m in masks):
        raise UndefinedMetricError("surface distances are undefined for an empty mask")


def asd(seg, gs, spacing=None) -> float:
    seg, gs = _pair(seg, gs)
    _require_nonempty(seg, gs)
    sp = _spacing(seg, spacing)
    b_seg, b_gs = extract_boundary(seg), extract_boundary(gs)
    d_seg = _dist_to(b_gs, sp)[b_seg]
    d_gs = _dist_to(b_seg, sp)[b_gs]
    return float((d_seg.sum() + d_gs.sum()) / (d_seg.size + d_gs.size))


def hausdorff(seg, gs, spacing=None, mode: str = "symmetric") -> float:
    """Directed (seg -> gs) or symmetric Hausdorff distance over mask voxels."""
    seg, gs = _pair(seg, gs)
    _require_nonempty(seg, gs)
    sp = _spacing(seg, spacing)
    forward = float(_dist_to(gs, sp)[seg].max())
    if mode == "directed":
        return forward
    if mode != "symmetric":
        raise ValueError(f"mode must be 'directed' or 'symmetric', got {mode!r}")
    return max(forward, float(_dist_to(seg, sp)[gs].max()))


# --- brute-force references ---------------------------------------------------


def extract_boundary_bruteforce(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    for idx in np.argwhere(mask):
        for axis in range(mask.ndim):
            for step in (-1, 1):
                nb = idx.copy()
                nb[axis] += step
                if nb[axis] < 0 or nb[axis] >= mask.shape[axis] or not mask[tuple(nb)]:
                    out[tuple(idx)] = True
    return out


def _pairwise_min(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    diff = src[:, None, :] - dst[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1)).min(axis=1)


def asd_bruteforce(seg, gs, spacing=None) -> float:
    seg, gs = _pair(seg, gs)
    _require_nonempty(seg, gs)
    sp = np.asarray(_spacing(seg, spacing))
    a = np.argwhere(extract_boundary_bruteforce(seg)) * sp
    b = np.argwhere(extract_boundary_bruteforce(gs)) * sp
    return float((_pairwise_min(a, b).sum() + _pairwise_min(b, a).sum()) / (len(a) + len(b)))


def hausdorff_bruteforce(seg, gs, spacing=None, mode: str = "symmetric") -> float:
    seg, gs = _pair(seg, gs)
    _require_nonempty(seg, gs)
    sp = np.asarray(_spacing(seg, spacing))
    a, b = np.argwhere(seg) * sp, np.argwhere(gs) * sp
    forward = float(_pairwise_min(a, b).max())
    if mode == "directed":
        return forward
    return max(forward, float(_pairwise_min(b, a).max()))


# --- per-case report ------------------------------------------------------------


@dataclass
class StructureMetrics:
    dice: float
    asd_mm: float | None
    hd_mm: float | None
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    case_id: str
    structures: dict[str, StructureMetrics]

    def to_json(self) -> str:
        body = {
            "case_id": self.case_id,
            "structures": {
                name: {
                    "Dice": m.dice,
                    "ASD": m.asd_mm,
                    "HD": m.hd_mm,
                    "flags": m.flags,
                }
                for name, m in self.structures.items()
            },
        }
        return json.dumps(body, sort_keys=False)

    def csv_rows(self) -> list[list]:
        return [
            [self.case_id, name, m.dice, _fmt(m.asd_mm), _fmt(m.hd_mm), ";".join(m.flags)]
            for name, m in self.structures.items()
        ]

    def mean_dice(self) -> float:
        return float(np.mean([m.dice for m in self.structures.values()]))


def _fmt(x):
    return "undefined" if x is None else x


def evaluate_case(pred_labels, gt_labels, spacing, case_id: str = "case") -> MetricsReport:
    """Dice, ASD and symmetric HD for Myo, LV and RV of one labelled volume."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    out = {}
    for name, cls in STRUCTURES.items():
        p, g = pred == cls, gt == cls
        flags = []
        d = dice_binary(p, g)
        if not p.any() and not g.any():
            flags.append("empty_both")
        elif not p.any():
            flags.append("empty_pred")
        elif not g.any():
            flags.append("empty_gt")
        if flags:
            out[name] = StructureMetrics(d, None, None, flags)
        else:
            out[name] = StructureMetrics(d, asd(p, g, spacing), hausdorff(p, g, spacing))
    return MetricsReport(case_id, out)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerows(r.csv_rows())
    return buf.getvalue()


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; sd is nan for a single value."""
    v = [float(x) for x in values]
    if not v:
        return math.nan, math.nan
    m = math.fsum(v) / len(v)
    if len(v) < 2:
        return m, math.nan
    return m, math.sqrt(math.fsum((x - m) ** 2 for x in v) / (len(v) - 1))
