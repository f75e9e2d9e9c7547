"""Differentiable operator set and a central-difference gradient checker.

The operators are thin wrappers over torch autograd, which records the tape
and runs reverse-mode accumulation. Each wrapper validates shapes up front so
mismatches surface as :class:`ShapeError` rather than deep framework errors.

Nondifferentiable points (relu kinks, max-pool ties) can be tracked with
:func:`kink_monitor` so gradient checks can resample inputs that sit too
close to one. The monitor also fingerprints the activation pattern (relu
signs, pooling winners); :func:`kink_free_coords` uses that to drop
coordinates whose finite-difference stencil straddles a kink.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import math
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError

_monitor: contextvars.ContextVar = contextvars.ContextVar("kink_monitor", default=None)


class KinkMonitor:
    """Smallest distance to a kink seen by relu/maxpool during a forward pass."""

    def __init__(self):
        self.min_margin = math.inf
        self._pattern = hashlib.sha256()

    def update(self, margin: torch.Tensor) -> None:
        if margin.numel():
            self.min_margin = min(self.min_margin, float(margin.detach().abs().min()))

    def record_pattern(self, t: torch.Tensor) -> None:
        self._pattern.update(t.detach().cpu().numpy().tobytes())

    @property
    def pattern(self) -> str:
        """Digest of every relu sign and pooling argmax seen so far."""
        return self._pattern.hexdigest()


@contextlib.contextmanager
def kink_monitor():
    mon = KinkMonitor()
    token = _monitor.set(mon)
    try:
        yield mon
    finally:
        _monitor.reset(token)


def check_finite(x: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite value in {where}")
    return x


def _require_ndim(x, ndim, op):
    if x.dim() != ndim:
        raise ShapeError(f"{op}: expected {ndim}D input, got shape {tuple(x.shape)}")


def conv2d(x, weight, bias=None, padding: str = "same"):
    """Stride-1 convolution; ``x`` is (N, C, H, W), ``weight`` (O, C, k, k)."""
    _require_ndim(x, 4, "conv2d")
    if weight.dim() != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: weight {tuple(weight.shape)} incompatible with input {tuple(x.shape)}"
        )
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    return F.conv2d(x, weight, bias, padding=padding)


def upsample2x(x):
    """Nearest-neighbour upsampling by two in both spatial axes."""
    _require_ndim(x, 4, "upsample2x")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def maxpool2d(x):
    _require_ndim(x, 4, "maxpool2d")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {tuple(x.shape[2:])}")
    mon = _monitor.get()
    if mon is not None:
        n, c, h, w = x.shape
        win = x.detach().reshape(n, c, h // 2, 2, w // 2, 2).permute(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        top2 = win.topk(2, dim=1).values
        # ties at exactly zero come from relu clipping; relu already reports
        # how far those pre-activations are from switching on
        live = top2[:, 0] != 0
        mon.update(top2[live, 0] - top2[live, 1])
        mon.record_pattern(win.argmax(dim=1).to(torch.uint8))
    return F.max_pool2d(x, 2)


def relu(x):
    mon = _monitor.get()
    if mon is not None:
        mon.update(x)
        mon.record_pattern(x.detach() > 0)
    return torch.relu(x)


def dense(x, weight, bias=None):
    """Fully connected layer on (N, in) -> (N, out)."""
    _require_ndim(x, 2, "dense")
    if weight.dim() != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: weight {tuple(weight.shape)} incompatible with {tuple(x.shape)}")
    return F.linear(x, weight, bias)


def softmax_channels(x):
    if x.dim() < 2:
        raise ShapeError("softmax_channels: need a channel axis at dim 1")
    return torch.softmax(x, dim=1)


def log_softmax_channels(x):
    """Log of :func:`softmax_channels`, computed without underflow."""
    if x.dim() < 2:
        raise ShapeError("log_softmax_channels: need a channel axis at dim 1")
    return torch.log_softmax(x, dim=1)


def sigmoid(x):
    return torch.sigmoid(x)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return a + b


def scale(x, c: float):
    return x * c


def reduce_mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def log(x):
    return torch.log(x)


def power(x, exponent: float):
    return torch.pow(x, exponent)


def concat_channels(tensors):
    spatial = {tuple(t.shape[2:]) for t in tensors}
    batch = {t.shape[0] for t in tensors}
    if len(spatial) != 1 or len(batch) != 1:
        raise ShapeError(f"concat_channels: mismatched shapes {[tuple(t.shape) for t in tensors]}")
    return torch.cat(tensors, dim=1)


def global_avg_pool(x):
    _require_ndim(x, 4, "global_avg_pool")
    return x.mean(dim=(2, 3))


# --- gradient checking -------------------------------------------------------


def _scalar(f, x):
    out = f(x)
    if out.numel() != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {tuple(out.shape)}")
    return check_finite(out.reshape(()), "grad_check objective")


def analytic_grad(f: Callable, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(_scalar(f, x), x, allow_unused=True)
    return torch.zeros_like(x) if g is None else g.detach()


def relative_errors(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    diff = (analytic - numeric).abs()
    return diff / torch.clamp(analytic.abs() + numeric.abs(), min=1e-8)


def grad_check(
    f: Callable,
    x: torch.Tensor,
    h: float = 1e-6,
    coords=None,
) -> float:
    """Max relative error between autograd and central differences.

    ``coords`` optionally restricts the comparison to a subset of flat
    indices; by default every coordinate of ``x`` is perturbed.
    """
    x = x.detach().to(torch.float64)
    g = analytic_grad(f, x).reshape(-1)
    flat = x.reshape(-1)
    idx = range(flat.numel()) if coords is None else [int(i) for i in coords]
    errs = []
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xp[i] += h
            xm = flat.clone()
            xm[i] -= h
            fp = _scalar(f, xp.reshape(x.shape))
            fm = _scalar(f, xm.reshape(x.shape))
            num = (fp - fm) / (2 * h)
            errs.append(float(relative_errors(g[i], num)))
    return max(errs) if errs else 0.0


def _pattern_at(f, x):
    with torch.no_grad(), kink_monitor() as mon:
        f(x)
    return mon.pattern


def kink_free_coords(f: Callable, x: torch.Tensor, h: float, coords) -> list[int]:
    """Subset of ``coords`` whose stencil x +- h*e_i keeps the activation pattern of x."""
    x = x.detach().to(torch.float64)
    flat = x.reshape(-1)
    centre = _pattern_at(f, x)
    keep = []
    for i in coords:
        same = True
        for step in (h, -h):
            xs = flat.clone()
            xs[int(i)] += step
            if _pattern_at(f, xs.reshape(x.shape)) != centre:
                same = False
                break
        if same:
            keep.append(int(i))
    return keep


def directional_check(f: Callable, x: torch.Tensor, direction: torch.Tensor, h: float = 1e-6) -> float:
    """Relative error of the directional derivative along ``direction``."""
    x = x.detach().to(torch.float64)
    d = direction.detach().to(torch.float64)
    g = analytic_grad(f, x)
    with torch.no_grad():
        num = (_scalar(f, x + h * d) - _scalar(f, x - h * d)) / (2 * h)
    return float(relative_errors((g * d).sum(), num))
