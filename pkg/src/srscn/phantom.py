"""Synthetic apex-to-base cardiac phantoms and the volume container format.

Each phantom is a short-axis stack: an elliptical LV blood pool wrapped in a
myocardial ring, with an RV crescent attached on one side. Structures shrink
toward the apex, where the LV and RV vanish and only a myocardial cap remains.

Container layout (one file per volume)::

    srscn-volume 1
    dims=Z Y X
    spacing=dz dy dx
    slice_positions=p0 p1 ...
    intensity_offset=0
    intensity_bytes=4*Z*Y*X
    label_offset=4*Z*Y*X
    label_bytes=Z*Y*X
    end
    <little-endian float32 intensities><uint8 labels>

Offsets are counted from the first byte after the ``end`` line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError

BACKGROUND, LV, RV, MYO = 0, 1, 2, 3
CLASS_NAMES = {BACKGROUND: "background", LV: "LV", RV: "RV", MYO: "Myo"}
N_CLASSES = 4

# background, LV blood, RV blood, myocardium on a 0-1 scale
BASE_INTENSITY = np.array([0.2, 0.8, 0.7, 0.45])

MAGIC = "srscn-volume 1"
VOLUME_SUFFIX = ".vol"


@dataclass
class LabeledVolume:
    """Image stack with per-voxel class labels, ordered apex (0) to base (1)."""

    intensities: np.ndarray
    labels: np.ndarray
    spacing: tuple[float, float, float]
    slice_positions: np.ndarray

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.slice_positions = np.asarray(self.slice_positions, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.intensities.ndim != 3:
            raise ConfigurationError(f"intensities must be 3D, got {self.intensities.shape}")
        if self.intensities.shape != self.labels.shape:
            raise ConfigurationError(
                f"intensity shape {self.intensities.shape} != label shape {self.labels.shape}"
            )
        if self.labels.size and self.labels.max() >= N_CLASSES:
            raise ConfigurationError("label values must lie in {0,1,2,3}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigurationError(f"spacing must be three positive values, got {self.spacing}")
        if self.slice_positions.shape != (self.intensities.shape[0],):
            raise ConfigurationError("need one slice position per slice")
        if np.any(np.diff(self.slice_positions) <= 0):
            raise ConfigurationError("slice positions must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, LabeledVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and np.array_equal(self.intensities, other.intensities)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.slice_positions, other.slice_positions)
        )


@dataclass
class PhantomConfig:
    seed: int = 0
    n_slices: int = 10
    height: int = 64
    width: int = 64
    noise_sigma: float = 0.08
    intensity_heterogeneity: float = 0.5
    spacing: tuple[float, float, float] = field(default=(10.0, 1.5, 1.5))

    def validate(self) -> None:
        if self.n_slices < 3:
            raise ConfigurationError(f"n_slices must be >= 3, got {self.n_slices}")
        if self.height < 32 or self.width < 32:
            raise ConfigurationError(f"height and width must be >= 32, got {self.height}x{self.width}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.intensity_heterogeneity <= 1.0:
            raise ConfigurationError("intensity_heterogeneity must lie in [0, 1]")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigurationError(f"spacing must be three positive values, got {self.spacing}")


def _elliptic_radius(yy, xx, cy, cx, theta, aspect):
    """Distance from (cy, cx) in a rotated metric stretched by ``aspect``."""
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return np.sqrt((u / aspect) ** 2 + (v * aspect) ** 2)


def _slice_labels(t, shape, geo):
    """Rasterise one slice at normalised depth ``t`` (0 = apex)."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    cy = geo["cy"] + geo["drift"][0] * (t - 0.5)
    cx = geo["cx"] + geo["drift"][1] * (t - 0.5)
    rho = _elliptic_radius(yy, xx, cy, cx, geo["theta"], geo["aspect"])

    r_lv = geo["r_lv"] * np.sqrt(t)
    r_out = r_lv + geo["thickness"] * (0.75 + 0.25 * t)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[rho < r_out] = MYO
    if r_lv > 0:
        labels[rho < r_lv] = LV

    g = np.clip((t - 0.12) / 0.88, 0.0, 1.0) ** 0.6
    if g > 0:
        phi = geo["rv_angle"]
        offset = 0.8 * r_out
        ry, rx = cy + offset * np.sin(phi), cx + offset * np.cos(phi)
        dy, dx = yy - ry, xx - rx
        radial = dx * np.cos(phi) + dy * np.sin(phi)
        tangential = -dx * np.sin(phi) + dy * np.cos(phi)
        a_rad = 0.35 * r_out + geo["rv_size"] * g
        a_tan = 1.15 * r_out + 0.3 * geo["rv_size"] * g
        inside = (radial / a_rad) ** 2 + (tangential / a_tan) ** 2 < 1.0
        labels[inside & (rho >= r_out)] = RV
    return labels


def _sample_geometry(rng, height, width):
    size = min(height, width)
    scale = rng.uniform(0.85, 1.1)
    aspect = rng.uniform(0.87, 1.15)
    r_lv = 0.13 * size * scale
    return {
        "cy": height / 2 + rng.uniform(-0.05, 0.05) * height,
        "cx": width / 2 + rng.uniform(-0.03, 0.07) * width,
        "drift": rng.uniform(-1.5, 1.5, size=2),
        "theta": rng.uniform(0, np.pi),
        "aspect": aspect,
        "r_lv": r_lv,
        # ring stays >= 3 px so the LV and RV can never touch
        "thickness": max(3.0 / min(aspect, 1 / aspect), 0.42 * r_lv),
        "rv_angle": np.pi + rng.uniform(-0.35, 0.35),
        "rv_size": 0.55 * r_lv,
    }


def _slice_intensities(labels, rng, cfg):
    img = BASE_INTENSITY[labels].astype(np.float64)
    myo = labels == MYO
    if cfg.intensity_heterogeneity > 0 and myo.any():
        ys, xs = np.nonzero(myo)
        yy, xx = np.mgrid[0 : labels.shape[0], 0 : labels.shape[1]]
        patches = np.zeros(labels.shape)
        for _ in range(int(rng.integers(1, 4))):
            k = int(rng.integers(len(ys)))
            width = rng.uniform(1.5, 4.0)
            amp = rng.uniform(0.5, 1.0)
            patches += amp * np.exp(-((yy - ys[k]) ** 2 + (xx - xs[k]) ** 2) / (2 * width**2))
        img += 0.35 * cfg.intensity_heterogeneity * np.minimum(patches, 1.0) * myo
    # partial-volume blur before acquisition noise
    img = ndimage.gaussian_filter(img, 0.6, mode="nearest")
    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return img


def generate_phantom(cfg: PhantomConfig) -> LabeledVolume:
    """Build one phantom; the output is a pure function of ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    geo = _sample_geometry(rng, cfg.height, cfg.width)
    positions = np.arange(cfg.n_slices) / (cfg.n_slices - 1)
    labels = np.stack([_slice_labels(t, (cfg.height, cfg.width), geo) for t in positions])
    intensities = np.stack([_slice_intensities(sl, rng, cfg) for sl in labels])
    return LabeledVolume(intensities.astype(np.float32), labels, cfg.spacing, positions)


def phantom_seeds(master_seed: int, count: int) -> list[int]:
    """Independent per-volume seeds derived from one master seed."""
    state = np.random.SeedSequence(master_seed).generate_state(count, dtype=np.uint32)
    return [int(s) for s in state]


def generate_corpus(master_seed: int, count: int, **cfg_kwargs) -> list[LabeledVolume]:
    return [
        generate_phantom(PhantomConfig(seed=s, **cfg_kwargs)) for s in phantom_seeds(master_seed, count)
    ]


# --- container ---------------------------------------------------------------


def write_volume(v: LabeledVolume, path) -> None:
    z, y, x = v.shape
    n = z * y * x
    header = [
        MAGIC,
        f"dims={z} {y} {x}",
        "spacing=" + " ".join(repr(s) for s in v.spacing),
        "slice_positions=" + " ".join(repr(float(p)) for p in v.slice_positions),
        "intensity_offset=0",
        f"intensity_bytes={4 * n}",
        f"label_offset={4 * n}",
        f"label_bytes={n}",
        "end",
    ]
    payload = v.intensities.astype("<f4").tobytes() + v.labels.astype(np.uint8).tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload)


def _parse_header(raw: bytes) -> tuple[dict[str, str], int]:
    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FormatError("header is not terminated by an 'end' line")
        line = raw[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)
    if not lines or lines[0] != MAGIC:
        raise FormatError("not an srscn volume container")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    return fields, pos


def read_volume(path) -> LabeledVolume:
    raw = Path(path).read_bytes()
    fields, start = _parse_header(raw)
    try:
        dims = tuple(int(d) for d in fields["dims"].split())
        spacing = tuple(float(s) for s in fields["spacing"].split())
        positions = np.array([float(p) for p in fields["slice_positions"].split()])
        i_off, i_len = int(fields["intensity_offset"]), int(fields["intensity_bytes"])
        l_off, l_len = int(fields["label_offset"]), int(fields["label_bytes"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad or missing header field: {exc}") from exc
    if len(dims) != 3 or min(dims) <= 0:
        raise FormatError(f"dims must be three positive integers, got {dims}")
    n = dims[0] * dims[1] * dims[2]
    if i_len != 4 * n or l_len != n:
        raise FormatError(f"byte counts {i_len}/{l_len} do not match dims {dims}")
    payload = raw[start:]
    if len(payload) != i_len + l_len or i_off + i_len > len(payload) or l_off + l_len > len(payload):
        raise FormatError(
            f"payload holds {len(payload)} bytes, header promises {i_len + l_len}"
        )
    intensities = np.frombuffer(payload, dtype="<f4", count=n, offset=i_off).reshape(dims)
    labels = np.frombuffer(payload, dtype=np.uint8, count=n, offset=l_off).reshape(dims)
    try:
        return LabeledVolume(intensities.astype(np.float32), labels.copy(), spacing, positions)
    except ConfigurationError as exc:
        raise FormatError(str(exc)) from exc


def write_corpus(volumes, out_dir, prefix: str = "case") -> list[Path]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, v in enumerate(volumes):
        p = Path(out_dir) / f"{prefix}_{i:03d}{VOLUME_SUFFIX}"
        write_volume(v, p)
        paths.append(p)
    return paths


def read_corpus(in_dir) -> list[LabeledVolume]:
    paths = sorted(Path(in_dir).glob(f"*{VOLUME_SUFFIX}"))
    if not paths:
        raise FormatError(f"no {VOLUME_SUFFIX} files in {in_dir}")
    return [read_volume(p) for p in paths]
