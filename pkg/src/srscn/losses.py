"""Segmentation objective and the shape, position, code and adversarial regularizers.

Conventions: probability maps are (N, C, H, W) softmax fields, ground truth is
an integer label map (N, H, W) or its one-hot encoding. Batch-summed
regularizers are divided by the batch size so their scale matches one sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import diffcore as dc
from .errors import ConfigurationError, ShapeError

VARIANTS = ("UNET", "SCN", "SRNN", "SRSCN", "ACNN", "GAN")
COMPONENTS = ("seg_dice", "seg_cross", "sr", "sc", "acnn", "adv")

DICE_SMOOTH = 1.0


@dataclass
class LossConfig:
    lambda_dice: float = 0.8
    lambda_cross: float = 0.2
    gamma_dice: float = 0.3
    gamma_cross: float = 0.3
    # None -> all ones; training fills these from label frequencies
    class_weights: tuple[float, ...] | None = None
    lambda_sr: float = 5e-4
    lambda_sc: float = 1e-6
    lambda_adv: float = 0.1
    eps_clamp: float = 1e-7

    def validate(self) -> None:
        for name in ("lambda_dice", "lambda_cross", "lambda_sr", "lambda_sc", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("gamma_dice", "gamma_cross"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in (0, 1]")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ConfigurationError("class weights must be > 0")
        if not 0 < self.eps_clamp <= 1e-3:
            raise ConfigurationError("eps_clamp must lie in (0, 1e-3]")

    def weight_of(self, component: str) -> float:
        return {
            "seg_dice": self.lambda_dice,
            "seg_cross": self.lambda_cross,
            "sr": self.lambda_sr,
            "sc": self.lambda_sc,
            "acnn": self.lambda_sr,
            "adv": self.lambda_adv,
        }[component]


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out


def one_hot(labels: torch.Tensor, n_classes: int = 4) -> torch.Tensor:
    """(N, H, W) integer labels -> (N, C, H, W) float one-hot."""
    return F.one_hot(labels.long(), n_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def class_weights_from_frequencies(freqs) -> tuple[float, ...]:
    """w_l = (sum_k f_k / f_l) ** 0.5; classes never seen get the largest weight."""
    freqs = torch.as_tensor(freqs, dtype=torch.float64)
    total = freqs.sum()
    seen = freqs > 0
    w = torch.zeros_like(freqs)
    w[seen] = (total / freqs[seen]) ** 0.5
    if (~seen).any():
        w[~seen] = w[seen].max() if seen.any() else 1.0
    return tuple(float(x) for x in w)


def _check_pair(p, y):
    if p.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")


def soft_dice(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Smoothed soft Dice per sample and class, shape (N, C)."""
    _check_pair(p, y)
    dims = tuple(range(2, p.dim()))
    inter = (p * y).sum(dim=dims)
    return (2 * inter + DICE_SMOOTH) / (p.sum(dim=dims) + y.sum(dim=dims) + DICE_SMOOTH)


def soft_dice_per_class(p, y, cls: int) -> torch.Tensor:
    """Dice of one class over the whole batch treated as a single field."""
    _check_pair(p, y)
    pi, yi = p[:, cls], y[:, cls]
    return (2 * (pi * yi).sum() + DICE_SMOOTH) / (pi.sum() + yi.sum() + DICE_SMOOTH)


def _exp_log(x, gamma, eps):
    # (-ln x)^gamma; the clamp keeps the power's derivative finite at x -> 1
    return dc.power(-dc.log(torch.clamp(x, eps, 1 - eps)), gamma)


def _exp_log_of_log(log_x, gamma, eps):
    """(-ln x)^gamma from ln x, with the same clamped value as :func:`_exp_log`.

    The clamp fixes the value only. Its gradient is passed through, so a pixel
    whose true-class probability has underflowed still pulls on the logits.
    """
    u = -log_x
    lo, hi = -torch.log1p(torch.tensor(-eps, dtype=u.dtype)), -torch.log(torch.tensor(eps, dtype=u.dtype))
    u = u + (torch.clamp(u, lo, hi) - u).detach()
    return dc.power(u, gamma)


def seg_loss(p, y, cfg: LossConfig, log_p=None) -> LossValue:
    """Exponential-logarithmic loss: weighted Dice term plus weighted cross term.

    ``y`` may be an integer label map (N, H, W) or one-hot (N, C, H, W).
    ``log_p``, the log of ``p`` computed from logits, is optional. When given,
    the cross term is evaluated from it; the value is unchanged but gradients
    survive saturated softmax outputs.
    """
    if y.dim() == p.dim() - 1:
        y = one_hot(y, p.shape[1]).to(p.dtype)
    _check_pair(p, y)
    dice_term = dc.reduce_mean(_exp_log(soft_dice(p, y), cfg.gamma_dice, cfg.eps_clamp))

    # probability assigned to the true class at each pixel
    p_true = (p * y).sum(dim=1)
    if cfg.class_weights is None:
        w_pix = torch.ones_like(p_true)
    else:
        if len(cfg.class_weights) != p.shape[1]:
            raise ConfigurationError(f"need {p.shape[1]} class weights, got {len(cfg.class_weights)}")
        w = torch.as_tensor(cfg.class_weights, dtype=p.dtype)
        w_pix = torch.einsum("c,nc...->n...", w, y)
    if log_p is None:
        cross = _exp_log(p_true, cfg.gamma_cross, cfg.eps_clamp)
    else:
        _check_pair(log_p, y)
        cross = _exp_log_of_log((log_p * y).sum(dim=1), cfg.gamma_cross, cfg.eps_clamp)
    cross_term = dc.reduce_mean(w_pix * cross)

    total = cfg.lambda_dice * dice_term + cfg.lambda_cross * cross_term
    dc.check_finite(total, "segmentation loss")
    return LossValue(total, {"seg_dice": dice_term, "seg_cross": cross_term})


def sr_loss(r_hat: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Batch-mean squared Frobenius distance between two reconstructions."""
    _check_pair(r_hat, r)
    d = r_hat - r
    return (d * d).sum() / d.shape[0]


def sc_loss(p_hat: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Batch-mean squared error between predicted and true slice positions."""
    _check_pair(p_hat, p)
    d = (p_hat - p).reshape(p.shape[0], -1)
    return (d * d).sum() / d.shape[0]


def acnn_loss(code_pred: torch.Tensor, code_gt: torch.Tensor) -> torch.Tensor:
    """Batch-mean squared Euclidean distance between code vectors."""
    _check_pair(code_pred, code_gt)
    d = (code_pred - code_gt).reshape(code_pred.shape[0], -1)
    return (d * d).sum() / d.shape[0]


def gan_losses(d_real, d_fake, eps: float = 1e-7):
    """(discriminator loss, generator regularizer) from sigmoid cross entropy.

    The generator term only makes sense with the discriminator's parameters
    excluded from the optimizer step; callers are responsible for that.
    """
    real = torch.clamp(d_real, eps, 1 - eps)
    fake = torch.clamp(d_fake, eps, 1 - eps)
    d_loss = -dc.log(real).mean() - dc.log(1 - fake).mean()
    g_reg = -dc.log(fake).mean()
    return d_loss, g_reg


_EXTRA = {
    "UNET": (),
    "SRNN": ("sr",),
    "SCN": ("sc",),
    "SRSCN": ("sr", "sc"),
    "ACNN": ("acnn",),
    "GAN": ("adv",),
}


def combined_loss(variant: str, components: dict[str, torch.Tensor], cfg: LossConfig) -> LossValue:
    """Weighted sum of the segmentation components and the variant's regularizers."""
    if variant not in _EXTRA:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    used = ("seg_dice", "seg_cross") + _EXTRA[variant]
    missing = [c for c in used if c not in components]
    if missing:
        raise ConfigurationError(f"variant {variant} needs components {missing}")
    total = sum(cfg.weight_of(c) * components[c] for c in used)
    return LossValue(total, {c: components[c] for c in used})
