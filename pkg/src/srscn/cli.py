"""Command line front end: ``srscn <command> ...``.

On failure every command prints one JSON line to stderr, for example
``{"error": "ConfigurationError", "message": "..."}``, and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, nets
from . import train as T
from .augment import augment_corpus
from .errors import ConfigurationError, FormatError, SRSCNError
from .metrics import evaluate_case, reports_to_csv
from .phantom import LabeledVolume, generate_corpus, read_corpus, read_volume, write_corpus, write_volume

EXIT_CODES = {ConfigurationError: 2, FormatError: 3}


def _volumes(path) -> tuple[list[str], list[LabeledVolume]]:
    """Case ids and volumes from a single .vol file or a directory of them."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.vol"))
        if not files:
            raise FormatError(f"{p}: no .vol files")
        return [f.stem for f in files], read_corpus(p)
    if not p.exists():
        raise ConfigurationError(f"{p}: no such file or directory")
    return [p.stem], [read_volume(p)]


def _run_config(args) -> harness.RunConfig:
    cfg = harness.RunConfig.load(args.config) if args.config else harness.RunConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    return cfg


# --- commands ------------------------------------------------------------------


def cmd_phantom_gen(args):
    kw = json.loads(Path(args.phantom_config).read_text()) if args.phantom_config else {}
    if args.slices is not None:
        kw["n_slices"] = args.slices
    if args.size is not None:
        try:
            kw["height"], kw["width"] = (int(s) for s in args.size.lower().split("x"))
        except ValueError as exc:
            raise ConfigurationError(f"--size must look like 64x64, got {args.size!r}") from exc
    vols = generate_corpus(args.seed or 0, args.count, **kw)
    paths = write_corpus(vols, args.out)
    print(json.dumps({"written": len(paths), "out": str(args.out)}))


def cmd_augment(args):
    ids, vols = _volumes(args.inp)
    out = augment_corpus(vols, args.per_volume, args.seed or 0)
    paths = write_corpus(out, args.out, prefix="aug")
    print(json.dumps({"inputs": len(ids), "written": len(paths), "out": str(args.out)}))


def cmd_pretrain_sr(args):
    cfg = _run_config(args)
    pcfg = cfg.pretrain_config()
    if args.epochs is not None:
        pcfg.epochs = args.epochs
    if args.seed is not None:
        pcfg.seed = args.seed
    _, vols = _volumes(args.inp)
    heldout = _volumes(args.heldout)[1] if args.heldout else None
    sr, hist = T.pretrain_sr(vols, nets.SRSpec(**cfg.sr), pcfg, heldout=heldout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(sr, out)
    out.with_suffix(".history.json").write_text(json.dumps(hist, indent=2) + "\n")
    print(json.dumps({"checkpoint": str(out), "heldout_accuracy": hist.get("heldout_accuracy"),
                      "checksum": hist["checksum"]}))


def cmd_train(args):
    cfg = _run_config(args)
    tcfg = cfg.train_config(args.variant)
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.seed is not None:
        tcfg.seed = args.seed
    sr = None
    if args.sr_checkpoint:
        sr = nets.freeze(nets.load_checkpoint(args.sr_checkpoint))
        sr.eval()
    elif args.variant in T.NEEDS_SR:
        raise ConfigurationError(f"variant {args.variant} requires --sr-checkpoint")
    _, vols = _volumes(args.inp)
    val = _volumes(args.val)[1] if args.val else None
    res = T.train_variant(vols, tcfg, pretrained_sr=sr, val_volumes=val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(res.backbone, out / "backbone.ckpt")
    if res.sc_head is not None:
        nets.save_checkpoint(res.sc_head, out / "position_head.ckpt")
    if res.discriminator is not None:
        nets.save_checkpoint(res.discriminator, out / "discriminator.ckpt")
    (out / "history.csv").write_text(res.history.to_csv())
    print(json.dumps({"out": str(out), "epochs": len(res.history.records), "best_epoch": res.history.best_epoch}))


def cmd_predict(args):
    backbone = nets.load_checkpoint(args.checkpoint)
    if not isinstance(backbone, nets.Backbone):
        raise FormatError(f"{args.checkpoint} does not hold a backbone")
    backbone.eval()
    head = nets.load_checkpoint(args.position_head).eval() if args.position_head else None
    ids, vols = _volumes(args.inp)
    out = Path(args.out)
    positions = {}
    for case_id, v in zip(ids, vols):
        labels, pos = T.predict(backbone, v, head)
        write_volume(LabeledVolume(v.intensities, labels, v.spacing, v.slice_positions), out / f"{case_id}.vol")
        if pos is not None:
            positions[case_id] = [float(x) for x in pos]
    if positions:
        (out / "positions.json").write_text(json.dumps(positions, indent=2) + "\n")
    print(json.dumps({"predicted": len(ids), "out": str(out)}))


def cmd_eval(args):
    pred_ids, preds = _volumes(args.pred)
    gt_ids, gts = _volumes(args.gt)
    if len(preds) != len(gts):
        raise ConfigurationError(f"{len(preds)} predictions but {len(gts)} ground-truth volumes")
    reports = [evaluate_case(p.labels, g.labels, g.spacing, cid) for cid, p, g in zip(gt_ids, preds, gts)]
    text = reports_to_csv(reports)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    if args.json:
        for r in reports:
            print(r.to_json())
    else:
        sys.stdout.write(text)


def cmd_ablate(args):
    cfg = _run_config(args)
    report = harness.run_ablation(cfg, args.out)
    sys.stdout.write(report.to_csv())


# --- parser -------------------------------------------------------------------


def _common(p, out_required=True):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON run config, or 'default'")
    p.add_argument("--out", required=out_required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srscn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="phantom corpus tools")
    ph_sub = ph.add_subparsers(dest="phantom_command", required=True)
    gen = ph_sub.add_parser("gen", help="generate a phantom corpus")
    _common(gen)
    gen.add_argument("--count", type=int, default=45)
    gen.add_argument("--slices", type=int)
    gen.add_argument("--size", help="in-plane size HxW, e.g. 64x64")
    gen.add_argument("--phantom-config", help="JSON object of phantom parameters")
    gen.set_defaults(func=cmd_phantom_gen)

    aug = sub.add_parser("augment", help="write warped copies of a corpus")
    _common(aug)
    aug.add_argument("--in", dest="inp", required=True)
    aug.add_argument("--per-volume", type=int, default=1)
    aug.set_defaults(func=cmd_augment)

    pre = sub.add_parser("pretrain-sr", help="pretrain the shape autoencoder")
    _common(pre)
    pre.add_argument("--in", dest="inp", required=True)
    pre.add_argument("--heldout")
    pre.add_argument("--epochs", type=int)
    pre.set_defaults(func=cmd_pretrain_sr)

    tr = sub.add_parser("train", help="train one segmentation variant")
    _common(tr)
    tr.add_argument("--variant", required=True, choices=list(harness.METHOD_NAMES))
    tr.add_argument("--in", dest="inp", required=True)
    tr.add_argument("--val")
    tr.add_argument("--sr-checkpoint")
    tr.add_argument("--epochs", type=int)
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="segment volumes with a trained backbone")
    _common(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--position-head")
    pr.add_argument("--in", dest="inp", required=True)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="Dice/ASD/HD of predictions against ground truth")
    _common(ev, out_required=False)
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--json", action="store_true", help="one JSON report per case instead of CSV")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="run the full ablation study")
    _common(ab)
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (SRSCNError, ValueError, OSError, json.JSONDecodeError) as exc:
        kind = type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        for cls, code in EXIT_CODES.items():
            if isinstance(exc, cls):
                return code
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
