"""Training loops: shape-prior pretraining, per-variant segmentation training,
alternating adversarial training, and slice-wise inference."""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import diffcore as dc
from . import losses as L
from . import nets
from .errors import ConfigurationError, NumericError, TrainingError
from .metrics import STRUCTURES, dice_binary
from .phantom import N_CLASSES, LabeledVolume

log = logging.getLogger(__name__)

NEEDS_SR = ("SRNN", "SRSCN", "ACNN")
NEEDS_SC = ("SCN", "SRSCN")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def set_determinism(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def derive_seed(seed: int, stream: str) -> int:
    """Independent sub-seed for a named consumer (init, batch order, ...)."""
    key = [ord(c) for c in stream]
    return int(np.random.SeedSequence([int(seed), *key]).generate_state(1)[0])


@dataclass
class SliceData:
    images: torch.Tensor  # (N, 1, H, W)
    labels: torch.Tensor  # (N, H, W) int64
    positions: torch.Tensor  # (N,)

    @classmethod
    def from_volumes(cls, volumes) -> "SliceData":
        if not volumes:
            raise ConfigurationError("no training volumes")
        imgs = np.concatenate([v.intensities for v in volumes])[:, None]
        labs = np.concatenate([v.labels for v in volumes]).astype(np.int64)
        pos = np.concatenate([v.slice_positions for v in volumes])
        return cls(
            torch.from_numpy(imgs.astype(np.float32)),
            torch.from_numpy(labs),
            torch.from_numpy(pos.astype(np.float32)),
        )

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "SliceData":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return SliceData(self.images[idx], self.labels[idx], self.positions[idx])

    def class_frequencies(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1).numpy(), minlength=N_CLASSES).astype(np.float64)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


# --- shape-prior pretraining ---------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    deterministic: bool = True
    # inputs are blended with random soft maps, mixing weight ~ U(0, input_noise),
    # so the prior has seen non-one-hot fields before it scores network outputs
    input_noise: float = 0.8


def corrupt_onehot(onehot: torch.Tensor, max_mix: float, gen: torch.Generator) -> torch.Tensor:
    """Blend one-hot maps with random softmax fields; the result is still a distribution."""
    if max_mix <= 0:
        return onehot
    n = onehot.shape[0]
    alpha = torch.rand(n, 1, 1, 1, generator=gen, dtype=onehot.dtype) * max_mix
    noise = torch.softmax(2.0 * torch.randn(onehot.shape, generator=gen, dtype=onehot.dtype), dim=1)
    return (1 - alpha) * onehot + alpha * noise


def reconstruction_loss(recon, onehot, eps: float = 1e-7):
    """Per-pixel cross entropy of a reconstruction against its one-hot input."""
    p_true = (recon * onehot).sum(dim=1)
    return -torch.log(torch.clamp(p_true, eps, 1.0)).mean()


@torch.no_grad()
def sr_accuracy(sr: nets.ShapeAutoencoder, labels, batch_size: int = 32) -> float:
    """Fraction of pixels whose reconstructed argmax equals the input label."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    hits = 0
    for i in range(0, len(labels), batch_size):
        lab = labels[i : i + batch_size]
        hits += int((sr(L.one_hot(lab)).argmax(dim=1) == lab).sum())
    return hits / labels.numel()


def _label_stack(corpus) -> torch.Tensor:
    if isinstance(corpus, SliceData):
        return corpus.labels
    if len(corpus) and isinstance(corpus[0], LabeledVolume):
        return torch.from_numpy(np.concatenate([v.labels for v in corpus]).astype(np.int64))
    return torch.as_tensor(np.asarray(corpus), dtype=torch.long)


def pretrain_sr(label_corpus, spec: nets.SRSpec = nets.SRSpec(), cfg: PretrainConfig = PretrainConfig(),
                heldout=None):
    """Fit the label autoencoder; returns (frozen net, history dict)."""
    set_determinism(cfg.deterministic)
    labels = _label_stack(label_corpus)
    sr = nets.build("shape_autoencoder", spec, derive_seed(cfg.seed, "sr-init"))
    opt = torch.optim.Adam(sr.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    if not 0 <= cfg.input_noise < 1:
        raise ConfigurationError("input_noise must lie in [0, 1)")
    rng = np.random.default_rng(derive_seed(cfg.seed, "sr-batches"))
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "sr-noise"))
    history = {"epoch_loss": []}
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(labels), cfg.batch_size, rng):
            onehot = L.one_hot(labels[idx])
            loss = reconstruction_loss(sr(corrupt_onehot(onehot, cfg.input_noise, gen)), onehot)
            if not torch.isfinite(loss):
                raise TrainingError(f"autoencoder loss diverged at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history["epoch_loss"].append(total / count)
        log.debug("sr epoch %d loss %.5f", epoch + 1, total / count)
    sr.eval()
    nets.freeze(sr)
    if heldout is not None:
        history["heldout_accuracy"] = sr_accuracy(sr, _label_stack(heldout))
    history["checksum"] = nets.checksum(sr)
    return sr, history


# --- segmentation training ----------------------------------------------------


@dataclass
class TrainConfig:
    variant: str = "SRSCN"
    epochs: int | None = None  # None -> 30, or 10 for GAN
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    deterministic: bool = True
    max_steps: int | None = None
    auto_class_weights: bool = True
    backbone: nets.BackboneSpec = field(default_factory=nets.BackboneSpec)
    sc_hidden: int = 32
    discr: nets.DiscrSpec = field(default_factory=nets.DiscrSpec)
    discr_learning_rate: float = 1e-4
    # regularizer weights ramp linearly from 0 over this many steps
    warmup_steps: int = 100

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 10 if self.variant == "GAN" else 30

    def validate(self) -> None:
        if self.variant not in L.VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {L.VARIANTS}")
        if self.resolved_epochs() <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigurationError("epochs, batch_size and learning_rate must be positive")
        self.loss.validate()


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def column(self, key):
        return [r[key] for r in self.records]

    def to_csv(self) -> str:
        if not self.records:
            return ""
        keys = list(self.records[0])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(self.records)
        return buf.getvalue()


@dataclass
class TrainResult:
    backbone: nets.Backbone
    history: TrainHistory
    sc_head: nets.PositionHead | None = None
    discriminator: nets.Discriminator | None = None


def _components(variant, probs, bottleneck, labels, positions, cfg, sr, sc_head, discr, log_probs=None):
    """Raw (unweighted) loss components for one batch."""
    onehot = L.one_hot(labels).to(probs.dtype)
    seg = L.seg_loss(probs, onehot, cfg, log_probs)
    comps = dict(seg.components)
    if variant in ("SRNN", "SRSCN"):
        with torch.no_grad():
            r_gt = sr(onehot)
        comps["sr"] = L.sr_loss(sr(probs), r_gt)
    if variant in NEEDS_SC:
        comps["sc"] = L.sc_loss(sc_head(bottleneck), positions.to(probs.dtype))
    if variant == "ACNN":
        with torch.no_grad():
            c_gt = nets.acnn_encode(sr, onehot)
        comps["acnn"] = L.acnn_loss(nets.acnn_encode(sr, probs), c_gt)
    if variant == "GAN":
        _, comps["adv"] = L.gan_losses(discr(onehot).detach(), discr(probs), cfg.eps_clamp)
    return comps


def _forward(backbone, images):
    """Training forward pass: probabilities, their logs and the bottleneck."""
    logits, bottleneck = backbone.forward_logits(images)
    probs = dc.check_finite(dc.softmax_channels(logits), "backbone output")
    return probs, dc.log_softmax_channels(logits), bottleneck


@torch.no_grad()
def predict_probs(backbone, images, batch_size: int = 16):
    out, bottle = [], []
    for i in range(0, len(images), batch_size):
        p, b = backbone(images[i : i + batch_size])
        out.append(p)
        bottle.append(b)
    return torch.cat(out), torch.cat(bottle)


def argmax_labels(probs) -> np.ndarray:
    """Per-pixel argmax over classes; ties go to the lower class id."""
    return np.argmax(np.asarray(probs), axis=1).astype(np.uint8)


@torch.no_grad()
def predict(backbone: nets.Backbone, volume: LabeledVolume, sc_head: nets.PositionHead | None = None,
            batch_size: int = 16):
    """Slice-wise inference -> (label volume, per-slice positions or None)."""
    images = torch.from_numpy(volume.intensities[:, None].astype(np.float32))
    probs, bottleneck = predict_probs(backbone, images, batch_size)
    labels = argmax_labels(probs.numpy())
    positions = sc_head(bottleneck).numpy() if sc_head is not None else None
    return labels, positions


def volume_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Dice over the three cardiac structures."""
    return float(np.mean([dice_binary(pred == c, gt == c) for c in STRUCTURES.values()]))


def _check_inputs(cfg: TrainConfig, pretrained_sr):
    cfg.validate()
    if cfg.variant in NEEDS_SR and pretrained_sr is None:
        raise ConfigurationError(f"variant {cfg.variant} requires a pretrained shape autoencoder")


def _as_slices(data) -> SliceData:
    return data if isinstance(data, SliceData) else SliceData.from_volumes(list(data))


def _with_class_weights(cfg: TrainConfig, data: SliceData) -> L.LossConfig:
    if cfg.auto_class_weights and cfg.loss.class_weights is None:
        return replace(cfg.loss, class_weights=L.class_weights_from_frequencies(data.class_frequencies()))
    return cfg.loss


def _build_models(cfg: TrainConfig):
    backbone = nets.build("backbone", cfg.backbone, derive_seed(cfg.seed, "backbone-init"))
    sc_head = None
    if cfg.variant in NEEDS_SC:
        spec = nets.SCHeadSpec(in_channels=cfg.backbone.channels()[-1], hidden=cfg.sc_hidden)
        sc_head = nets.build("position_head", spec, derive_seed(cfg.seed, "sc-init"))
    discr = None
    if cfg.variant == "GAN":
        discr = nets.build("discriminator", cfg.discr, derive_seed(cfg.seed, "discr-init"))
    return backbone, sc_head, discr


class _Validator:
    """Validation loss components and mean Dice; tracks the best epoch."""

    def __init__(self, volumes, variant, lcfg, sr, sc_head, discr):
        self.volumes = list(volumes or [])
        self.data = SliceData.from_volumes(self.volumes) if self.volumes else None
        self.variant, self.lcfg = variant, lcfg
        self.sr, self.sc_head, self.discr = sr, sc_head, discr

    @torch.no_grad()
    def __call__(self, backbone) -> dict:
        if self.data is None:
            return {}
        probs, bottleneck = predict_probs(backbone, self.data.images)
        comps = _components(self.variant, probs, bottleneck, self.data.labels, self.data.positions,
                            self.lcfg, self.sr, self.sc_head, self.discr)
        total = L.combined_loss(self.variant, comps, self.lcfg)
        rec = {f"val_{k}": v for k, v in total.as_floats().items()}
        pred = argmax_labels(probs.numpy())
        dices, start = [], 0
        for v in self.volumes:
            n = v.shape[0]
            dices.append(volume_dice(pred[start : start + n], v.labels))
            start += n
        rec["val_dice"] = float(np.mean(dices))
        return rec


def _record(epoch, step, sums, count, val, t0, models):
    rec = {"epoch": epoch, "step": step}
    rec.update({f"train_{k}": v / count for k, v in sums.items()})
    rec.update(val)
    rec["wall_clock_s"] = round(time.perf_counter() - t0, 3)
    rec["checksum"] = "/".join(nets.checksum(m) for m in models if m is not None)
    return rec


def _ramped(lcfg: L.LossConfig, warmup: int, step: int) -> L.LossConfig:
    if warmup <= 0 or step >= warmup:
        return lcfg
    f = step / warmup
    return replace(lcfg, lambda_sr=f * lcfg.lambda_sr, lambda_sc=f * lcfg.lambda_sc,
                   lambda_adv=f * lcfg.lambda_adv)


def _head_only_sc(sc_head, bottleneck, positions, lambda_sc):
    """Extra objective that lifts the head's gradient to the unweighted SC loss.

    The head only ever sees lambda_sc * L_SC. With lambda_sc = 1e-6 its
    gradients sit below Adam's epsilon and it barely moves. Adding
    (1 - lambda_sc) * L_SC on a detached bottleneck gives the head exactly
    grad L_SC; the backbone still receives lambda_sc * grad L_SC.
    """
    sc = L.sc_loss(sc_head(bottleneck.detach()), positions.to(bottleneck.dtype))
    return (1.0 - lambda_sc) * sc


def _accumulate(sums, lv: L.LossValue, n):
    for k, v in lv.as_floats().items():
        sums[k] = sums.get(k, 0.0) + v * n


def train_variant(data, cfg: TrainConfig, pretrained_sr: nets.ShapeAutoencoder | None = None,
                  val_volumes=None) -> TrainResult:
    """Train one segmentation variant with Adam on its combined objective.

    ``data`` is a list of volumes or a :class:`SliceData`. With validation
    volumes the returned parameters are those of the best validation-Dice
    epoch; otherwise the final ones.
    """
    _check_inputs(cfg, pretrained_sr)
    if cfg.variant == "GAN":
        return train_gan(data, cfg, val_volumes=val_volumes)
    try:
        return _train_variant(data, cfg, pretrained_sr, val_volumes)
    except NumericError as exc:
        raise TrainingError(f"{cfg.variant}: {exc}") from exc


def _train_variant(data, cfg, pretrained_sr, val_volumes):
    set_determinism(cfg.deterministic)
    data = _as_slices(data)
    lcfg = _with_class_weights(cfg, data)
    backbone, sc_head, _ = _build_models(cfg)
    sr = pretrained_sr
    sr_sum = nets.checksum(sr) if sr is not None else None
    params = list(backbone.parameters()) + (list(sc_head.parameters()) if sc_head else [])
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
    validate = _Validator(val_volumes, cfg.variant, lcfg, sr, sc_head, None)

    history = TrainHistory()
    best, best_dice = None, -np.inf
    step, t0 = 0, time.perf_counter()
    for epoch in range(1, cfg.resolved_epochs() + 1):
        sums, count = {}, 0
        for idx in _batches(len(data), cfg.batch_size, rng):
            probs, log_probs, bottleneck = _forward(backbone, data.images[idx])
            comps = _components(cfg.variant, probs, bottleneck, data.labels[idx], data.positions[idx],
                                lcfg, sr, sc_head, None, log_probs)
            step_cfg = _ramped(lcfg, cfg.warmup_steps, step)
            lv = L.combined_loss(cfg.variant, comps, step_cfg)
            if not torch.isfinite(lv.total):
                raise TrainingError(f"{cfg.variant}: non-finite loss at step {step}")
            opt.zero_grad()
            objective = lv.total
            if sc_head is not None:
                objective = objective + _head_only_sc(sc_head, bottleneck, data.positions[idx], step_cfg.lambda_sc)
            objective.backward()
            opt.step()
            _accumulate(sums, lv, len(idx))
            count += len(idx)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        val = validate(backbone)
        history.records.append(_record(epoch, step, sums, count, val, t0, [backbone, sc_head]))
        if val and val["val_dice"] > best_dice:
            best_dice = val["val_dice"]
            best = (epoch, copy.deepcopy(backbone.state_dict()),
                    copy.deepcopy(sc_head.state_dict()) if sc_head else None)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    if best is not None:
        history.best_epoch = best[0]
        backbone.load_state_dict(best[1])
        if sc_head is not None:
            sc_head.load_state_dict(best[2])
    if sr is not None and nets.checksum(sr) != sr_sum:
        raise TrainingError("shape autoencoder parameters changed during segmentation training")
    backbone.eval()
    return TrainResult(backbone, history, sc_head=sc_head)


# --- adversarial training -----------------------------------------------------


def discriminator_step(discr, opt, probs, onehot, eps: float = 1e-7):
    """One discriminator update on gold-standard vs predicted maps; returns (loss, accuracy)."""
    d_real = discr(onehot)
    d_fake = discr(probs.detach())
    d_loss, _ = L.gan_losses(d_real, d_fake, eps)
    if not torch.isfinite(d_loss):
        raise TrainingError("discriminator loss is not finite")
    opt.zero_grad()
    d_loss.backward()
    opt.step()
    acc = 0.5 * (float((d_real > 0.5).float().mean()) + float((d_fake < 0.5).float().mean()))
    return d_loss.item(), acc


def train_gan(data, cfg: TrainConfig, val_volumes=None) -> TrainResult:
    """Alternate one discriminator step and one segmenter step per batch."""
    if cfg.variant != "GAN":
        cfg = replace(cfg, variant="GAN")
    cfg.validate()
    try:
        return _train_gan(data, cfg, val_volumes)
    except NumericError as exc:
        raise TrainingError(f"GAN: {exc}") from exc


def _train_gan(data, cfg, val_volumes):
    set_determinism(cfg.deterministic)
    data = _as_slices(data)
    lcfg = _with_class_weights(cfg, data)
    backbone, _, discr = _build_models(cfg)
    g_opt = torch.optim.Adam(backbone.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    d_opt = torch.optim.Adam(discr.parameters(), lr=cfg.discr_learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
    validate = _Validator(val_volumes, "GAN", lcfg, None, None, discr)

    history = TrainHistory()
    best, best_dice = None, -np.inf
    step, t0 = 0, time.perf_counter()
    for epoch in range(1, cfg.resolved_epochs() + 1):
        sums, count, d_sum, acc_sum = {}, 0, 0.0, 0.0
        for idx in _batches(len(data), cfg.batch_size, rng):
            images, labels = data.images[idx], data.labels[idx]
            onehot = L.one_hot(labels)
            probs, log_probs, bottleneck = _forward(backbone, images)
            d_loss, d_acc = discriminator_step(discr, d_opt, probs, onehot, lcfg.eps_clamp)

            discr.requires_grad_(False)
            try:
                comps = _components("GAN", probs, bottleneck, labels, None, lcfg, None, None, discr, log_probs)
                lv = L.combined_loss("GAN", comps, _ramped(lcfg, cfg.warmup_steps, step))
                if not torch.isfinite(lv.total):
                    raise TrainingError(f"GAN: non-finite segmenter loss at step {step}")
                g_opt.zero_grad()
                lv.total.backward()
                g_opt.step()
            finally:
                discr.requires_grad_(True)

            _accumulate(sums, lv, len(idx))
            d_sum += d_loss * len(idx)
            acc_sum += d_acc * len(idx)
            count += len(idx)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        val = validate(backbone)
        rec = _record(epoch, step, sums, count, val, t0, [backbone, discr])
        rec["train_discr_loss"] = d_sum / count
        rec["train_discr_acc"] = acc_sum / count
        history.records.append(rec)
        if val and val["val_dice"] > best_dice:
            best_dice = val["val_dice"]
            best = (epoch, copy.deepcopy(backbone.state_dict()), copy.deepcopy(discr.state_dict()))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    if best is not None:
        history.best_epoch = best[0]
        backbone.load_state_dict(best[1])
        discr.load_state_dict(best[2])
    backbone.eval()
    return TrainResult(backbone, history, discriminator=discr)

