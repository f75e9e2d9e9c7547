"""Ablation runner: data, shape-prior pretraining, every variant, evaluation, reports.

A run is described by a :class:`RunConfig` stored as JSON. ``run_ablation``
writes everything under ``out_dir``::

    config.json                 resolved configuration
    data/{train,val,test}/      phantom volumes (generated on demand)
    sr/                         autoencoder checkpoint and pretraining history
    <variant>/                  checkpoints, history.csv, predictions/*.vol
    per_case.csv                method x case x structure metrics (box-plot source)
    report.csv                  method x {LV, RV, Myo, Mean} Dice mean and sd
    metrics_table.csv           method x structure x {Dice, ASD, HD} mean and sd
    PARTIAL                     only present when a variant failed
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses as L
from . import nets
from . import train as T
from .augment import augment_corpus
from .errors import ConfigurationError, SRSCNError
from .metrics import METRIC_NAMES, STRUCTURES, MetricsReport, evaluate_case, mean_sd
from .phantom import LabeledVolume, PhantomConfig, generate_corpus, read_corpus, write_corpus, write_volume

log = logging.getLogger(__name__)

# display names, in the order of the results table
METHOD_NAMES = {"UNET": "U-Net", "SCN": "SCN", "SRNN": "SRNN", "SRSCN": "SRSCN", "ACNN": "ACNN", "GAN": "GAN"}
REPORT_COLUMNS = ("LV", "RV", "Myo", "Mean")
PARTIAL_MARKER = "PARTIAL"


@dataclass
class RunConfig:
    master_seed: int = 0
    n_train: int = 25
    n_val: int = 5
    n_test: int = 15
    variants: list[str] = field(default_factory=lambda: list(L.VARIANTS))
    # PhantomConfig fields other than the seed
    phantom: dict = field(default_factory=dict)
    augment_per_volume: int = 1
    deterministic: bool = True
    # TrainConfig scalars; "epochs" None means the per-variant default
    train: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    backbone: dict = field(default_factory=dict)
    sr: dict = field(default_factory=dict)
    # read volumes from here when present instead of generating them
    data_dir: str | None = None

    _TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "max_steps", "auto_class_weights",
                   "sc_hidden", "discr_learning_rate", "warmup_steps", "gan_epochs")
    _PRETRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "input_noise")

    def validate(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigurationError("n_train, n_val and n_test must all be >= 1")
        if self.augment_per_volume < 0:
            raise ConfigurationError("augment_per_volume must be >= 0")
        bad = [v for v in self.variants if v not in L.VARIANTS]
        if bad or not self.variants:
            raise ConfigurationError(f"variants must be a non-empty subset of {L.VARIANTS}, got {bad}")
        _check_keys("train", self.train, self._TRAIN_KEYS)
        _check_keys("pretrain", self.pretrain, self._PRETRAIN_KEYS)
        _check_keys("loss", self.loss, [f.name for f in fields(L.LossConfig)])
        _check_keys("backbone", self.backbone, [f.name for f in fields(nets.BackboneSpec)])
        _check_keys("sr", self.sr, [f.name for f in fields(nets.SRSpec)])
        _check_keys("phantom", self.phantom, [f.name for f in fields(PhantomConfig) if f.name != "seed"])
        PhantomConfig(**self.phantom).validate()
        self.loss_config().validate()

    def loss_config(self) -> L.LossConfig:
        kw = dict(self.loss)
        if kw.get("class_weights") is not None:
            kw["class_weights"] = tuple(kw["class_weights"])
        return L.LossConfig(**kw)

    def train_config(self, variant: str) -> T.TrainConfig:
        kw = dict(self.train)
        gan_epochs = kw.pop("gan_epochs", None)
        if variant == "GAN" and gan_epochs is not None:
            kw["epochs"] = gan_epochs
        return T.TrainConfig(
            variant=variant,
            seed=T.derive_seed(self.master_seed, "train"),
            loss=self.loss_config(),
            deterministic=self.deterministic,
            backbone=nets.BackboneSpec(**self.backbone),
            **kw,
        )

    def pretrain_config(self) -> T.PretrainConfig:
        return T.PretrainConfig(seed=T.derive_seed(self.master_seed, "pretrain"),
                                deterministic=self.deterministic, **self.pretrain)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read a JSON run config; the literal name ``default`` gives the defaults."""
        if str(path) == "default":
            cfg = cls()
            cfg.validate()
            return cfg
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read run config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("run config must be a JSON object")
        return cls.from_dict(raw)


def _check_keys(section, d, allowed):
    if not isinstance(d, dict):
        raise ConfigurationError(f"run config section {section!r} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {unknown}")


# --- data --------------------------------------------------------------------


@dataclass
class Splits:
    train: list[LabeledVolume]
    val: list[LabeledVolume]
    test: list[LabeledVolume]


def make_splits(cfg: RunConfig) -> Splits:
    total = cfg.n_train + cfg.n_val + cfg.n_test
    if cfg.data_dir and Path(cfg.data_dir).is_dir():
        root = Path(cfg.data_dir)
        splits = Splits(read_corpus(root / "train"), read_corpus(root / "val"), read_corpus(root / "test"))
        if (len(splits.train), len(splits.val), len(splits.test)) != (cfg.n_train, cfg.n_val, cfg.n_test):
            raise ConfigurationError(f"{root} does not hold a {cfg.n_train}/{cfg.n_val}/{cfg.n_test} split")
        return splits
    vols = generate_corpus(cfg.master_seed, total, **cfg.phantom)
    return Splits(vols[: cfg.n_train], vols[cfg.n_train : cfg.n_train + cfg.n_val], vols[cfg.n_train + cfg.n_val :])


def training_volumes(cfg: RunConfig, splits: Splits) -> list[LabeledVolume]:
    extra = augment_corpus(splits.train, cfg.augment_per_volume, T.derive_seed(cfg.master_seed, "augment"))
    return splits.train + extra


# --- reports -----------------------------------------------------------------


@dataclass
class AblationReport:
    # method display name -> per-case metrics, in run order
    cases: dict[str, list[MetricsReport]] = field(default_factory=dict)

    def per_case_dice(self, method: str) -> dict[str, list[float]]:
        """Column -> per-case Dice values; Mean is the per-case mean of the three structures."""
        out = {c: [] for c in REPORT_COLUMNS}
        for rep in self.cases[method]:
            for name in ("LV", "RV", "Myo"):
                out[name].append(rep.structures[name].dice)
            out["Mean"].append(rep.mean_dice())
        return out

    def rows(self) -> list[dict]:
        rows = []
        for method in self.cases:
            row = {"method": method}
            for col, vals in self.per_case_dice(method).items():
                row[f"{col}_mean"], row[f"{col}_sd"] = mean_sd(vals)
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        header = ["method"] + [f"{c}_{s}" for c in REPORT_COLUMNS for s in ("mean", "sd")]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in self.rows():
            w.writerow([row["method"]] + [_num(row[k]) for k in header[1:]])
        return buf.getvalue()

    def per_case_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "case_id", "structure", "dice", "asd_mm", "hd_mm", "flags"])
        for method, reps in self.cases.items():
            for rep in reps:
                for case_id, structure, dice, asd_mm, hd_mm, flags in rep.csv_rows():
                    w.writerow([method, case_id, structure, _num(dice), _num(asd_mm), _num(hd_mm), flags])
        return buf.getvalue()

    def metrics_table_csv(self) -> str:
        """Per method and structure: Dice, ASD and HD as mean and sd.

        Cases whose distance metrics are undefined are left out of the ASD/HD
        aggregates and counted in ``n_excluded``.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "structure"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "sd")]
                   + ["n_cases", "n_excluded"])
        for method, reps in self.cases.items():
            for name in STRUCTURES:
                ms = [r.structures[name] for r in reps]
                dice = mean_sd([m.dice for m in ms])
                defined = [m for m in ms if m.asd_mm is not None]
                asd_ = mean_sd([m.asd_mm for m in defined])
                hd_ = mean_sd([m.hd_mm for m in defined])
                w.writerow([method, name] + [_num(x) for x in (*dice, *asd_, *hd_)]
                           + [len(ms), len(ms) - len(defined)])
        return buf.getvalue()


def _num(x):
    if isinstance(x, str):
        return x
    if x is None:
        return "undefined"
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


# --- the run ---------------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _save_predictions(result: T.TrainResult, volumes, out: Path, prefix="case"):
    reports = []
    for i, v in enumerate(volumes):
        pred, _ = T.predict(result.backbone, v)
        case_id = f"{prefix}_{i:03d}"
        write_volume(LabeledVolume(v.intensities, pred, v.spacing, v.slice_positions), out / f"{case_id}.vol")
        reports.append(evaluate_case(pred, v.labels, v.spacing, case_id))
    return reports


def _write_reports(report: AblationReport, out: Path) -> None:
    _write_text(out / "report.csv", report.to_csv())
    _write_text(out / "per_case.csv", report.per_case_csv())
    _write_text(out / "metrics_table.csv", report.metrics_table_csv())


def run_ablation(cfg: RunConfig, out_dir) -> AblationReport:
    """Train every configured variant on identical data and seeds, evaluate on the test split."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / PARTIAL_MARKER).unlink(missing_ok=True)
    _write_text(out / "config.json", cfg.to_json() + "\n")
    T.set_determinism(cfg.deterministic)

    splits = make_splits(cfg)
    for name in ("train", "val", "test"):
        write_corpus(getattr(splits, name), out / "data" / name)
    train_vols = training_volumes(cfg, splits)

    sr = None
    if any(v in T.NEEDS_SR for v in cfg.variants):
        log.info("pretraining shape autoencoder on %d volumes", len(train_vols))
        sr, sr_hist = T.pretrain_sr(train_vols, nets.SRSpec(**cfg.sr), cfg.pretrain_config(), heldout=splits.val)
        nets.save_checkpoint(sr, out / "sr" / "shape_autoencoder.ckpt")
        _write_text(out / "sr" / "history.json", json.dumps(sr_hist, indent=2) + "\n")

    report = AblationReport()
    train_data = T.SliceData.from_volumes(train_vols)
    for variant in cfg.variants:
        vdir = out / variant
        log.info("training %s", variant)
        try:
            res = T.train_variant(train_data, cfg.train_config(variant), pretrained_sr=sr,
                                  val_volumes=splits.val)
        except SRSCNError as exc:
            _write_reports(report, out)
            _write_text(out / PARTIAL_MARKER, f"variant={variant}\nerror={type(exc).__name__}: {exc}\n")
            raise
        nets.save_checkpoint(res.backbone, vdir / "backbone.ckpt")
        if res.sc_head is not None:
            nets.save_checkpoint(res.sc_head, vdir / "position_head.ckpt")
        if res.discriminator is not None:
            nets.save_checkpoint(res.discriminator, vdir / "discriminator.ckpt")
        _write_text(vdir / "history.csv", res.history.to_csv())
        report.cases[METHOD_NAMES[variant]] = _save_predictions(res, splits.test, vdir / "predictions")
        _write_reports(report, out)
    return report


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (v if k == "method" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def aggregate_per_case(path) -> dict[str, dict[str, tuple[float, float]]]:
    """Recompute report.csv aggregates from per_case.csv."""
    per = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per.setdefault(row["method"], {}).setdefault(row["case_id"], {})[row["structure"]] = float(row["dice"])
    out = {}
    for method, cases in per.items():
        cols = {c: [] for c in REPORT_COLUMNS}
        for structs in cases.values():
            for name in ("LV", "RV", "Myo"):
                cols[name].append(structs[name])
            cols["Mean"].append(float(np.mean([structs[n] for n in STRUCTURES])))
        out[method] = {c: mean_sd(v) for c, v in cols.items()}
    return out
