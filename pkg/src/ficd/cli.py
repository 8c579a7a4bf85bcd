"""Command-line entry point: ``ficd {train,sample,metrics,centiloid,phantom}``.

Exit codes: 0 ok, 2 configuration, 3 I/O or data, 4 numeric abort,
5 shape incompatibility.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .autodiff import ShapeError
from .checkpoint import CheckpointError
from .diffusion import SampleConfig, SamplingError, mc_sample
from .losses import suvr_map
from .metrics import CentiloidAnchors, centiloid, ctx_mean_suvr, evaluate_pair, format_report
from .model import NetworkDenoiser, check_dims, load_checkpoint
from .phantom import PhantomSpec, write_dataset
from .trainer import NumericError, prepare_pairs, train_loop, write_curves
from .volume import EVAL, RAW, TRAIN, Volume3, VolumeError, normalize, read_volume, write_volume

log = logging.getLogger("ficd")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_SHAPE = 0, 2, 3, 4, 5


class DataError(Exception):
    pass


def _read(path):
    try:
        return read_volume(path)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except VolumeError as exc:
        raise DataError(f"{path}: {exc}") from None


# ----------------------------------------------------------------------------
# train

def find_pairs(data_dir):
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    ids = sorted(p.name[:-len("_mri.fvol")] for p in d.glob("*_mri.fvol"))
    ids = [i for i in ids if (d / f"{i}_pet.fvol").exists()]
    if not ids:
        raise DataError(f"no <id>_mri.fvol / <id>_pet.fvol pairs in {d}")
    return d, ids


def load_pairs(data_dir, need_masks=False):
    d, ids = find_pairs(data_dir)
    raw = []
    for i in ids:
        masks = {}
        if need_masks:
            masks = {"cerebellum": _read(d / f"{i}_cereb.fvol"), "ctx": _read(d / f"{i}_ctx.fvol")}
        raw.append((_read(d / f"{i}_mri.fvol"), _read(d / f"{i}_pet.fvol"), masks))
    return raw


def cmd_train(args):
    overrides = config_mod.parse_overrides(args.set)
    if args.loss_mode is not None:
        overrides["train.loss_mode"] = args.loss_mode
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    run = config_mod.load(args.config, overrides)
    log.info("resolved config:\n%s", run.to_text())
    cfg = run.train
    raw = load_pairs(args.data_dir, need_masks=cfg.loss_mode == "ficd_s")
    pairs = prepare_pairs(raw, cfg.loss_mode)
    check_dims(cfg.model, pairs[0].target.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text(), encoding="utf-8")
    result = train_loop(pairs, cfg, checkpoint_path=out / "checkpoint.fckpt",
                        resume_from=args.resume)
    write_curves(out / "curves.csv", result)
    return EXIT_OK


# ----------------------------------------------------------------------------
# sample

def cmd_sample(args):
    overrides = config_mod.parse_overrides(args.set)
    run = config_mod.load(args.config, overrides)
    try:
        params, sched, _, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"no such checkpoint: {args.checkpoint}") from None
    cond = normalize(_read(args.condition), TRAIN)
    check_dims(params.spec, cond.dims)
    sample = dict(run.sample)
    if args.mc is not None:
        sample["mc_repeats"] = args.mc
    if args.seed is not None:
        sample["seed"] = args.seed
    cfg = SampleConfig(sched, **sample)
    log.info("sampling %s with mc=%d seed=%d", args.condition, cfg.mc_repeats, cfg.seed)
    out = mc_sample(NetworkDenoiser(params), cond, cfg)
    write_volume(args.out, normalize(out, EVAL))
    return EXIT_OK


# ----------------------------------------------------------------------------
# metrics

def as_eval(v: Volume3, path):
    """Metric inputs: eval volumes as-is, train volumes remapped, raw in [0, 1]."""
    if v.range_tag == TRAIN:
        return normalize(v, EVAL)
    if v.range_tag == RAW:
        if v.voxels.min() < 0.0 or v.voxels.max() > 1.0:
            raise DataError(f"{path}: raw volume outside [0, 1]; store it eval-range")
        return Volume3(v.voxels, EVAL, v.stored_min, v.stored_max)
    return v


def read_manifest(path):
    base = Path(path).parent
    rows = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such manifest: {path}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'pair_id,pred,truth'")
        rows.append((parts[0], base / parts[1], base / parts[2]))
    return rows


def cmd_metrics(args):
    if args.pairs:
        items = read_manifest(args.pairs)
    elif args.pred and args.truth:
        items = [(Path(args.pred).stem, Path(args.pred), Path(args.truth))]
    else:
        raise config_mod.ConfigError("metrics needs --pred and --truth, or --pairs")
    rows = []
    for pair_id, pred, truth in items:
        a, b = as_eval(_read(pred), pred), as_eval(_read(truth), truth)
        if a.dims != b.dims:
            raise ShapeError(f"{pred} {a.dims} vs {truth} {b.dims}")
        rows.append((pair_id, evaluate_pair(a, b, bins=args.bins, window=min(args.window, *a.dims))))
    sys.stdout.write(format_report(rows))
    return EXIT_OK


# ----------------------------------------------------------------------------
# centiloid

def parse_anchors(text):
    try:
        yc, ad = (float(x) for x in text.split(","))
    except ValueError:
        raise config_mod.ConfigError(f"--anchors expects 'yc,ad', got {text!r}") from None
    try:
        return CentiloidAnchors(yc, ad)
    except ValueError as exc:
        raise config_mod.ConfigError(str(exc)) from None


def cmd_centiloid(args):
    anchors = parse_anchors(args.anchors)
    suv, cereb, ctx = _read(args.suv), _read(args.cereb), _read(args.ctx)
    if not suv.dims == cereb.dims == ctx.dims:
        raise ShapeError(f"suv {suv.dims}, cerebellum {cereb.dims} and ctx {ctx.dims} differ")
    suvr = suvr_map(suv, cereb)
    value = ctx_mean_suvr(suvr, ctx)
    sys.stdout.write("ctx_suvr,centiloid\n")
    sys.stdout.write(f"{value:.6f},{centiloid(value, anchors):.6f}\n")
    return EXIT_OK


# ----------------------------------------------------------------------------
# phantom

def read_phantom_spec(path):
    if path is None:
        return PhantomSpec()
    try:
        mapping = config_mod.parse_text(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no such spec file: {path}") from None
    mapping = {k[len("phantom."):] if k.startswith("phantom.") else k: v for k, v in mapping.items()}
    try:
        return PhantomSpec.from_mapping(mapping)
    except KeyError as exc:
        raise config_mod.ConfigError(f"unknown phantom key: {exc.args[0]}") from None
    except ValueError as exc:
        raise config_mod.ConfigError(str(exc)) from None


def cmd_phantom(args):
    spec = read_phantom_spec(args.spec)
    if args.n < 1:
        raise config_mod.ConfigError("--n must be at least 1")
    written = write_dataset(spec, args.n, args.out_dir, masks=args.masks)
    log.info("wrote %d volumes to %s", len(written), args.out_dir)
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ficd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser on paired FVOL volumes")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--loss-mode", choices=["ficd", "ddpm", "ficd-s"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="synthesize a PET volume from an MRI condition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mc", type=int, help="Monte-Carlo repeats")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("metrics", help="PSNR/SSIM/MAE/NMI report as CSV")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--pairs", help="manifest of 'pair_id,pred,truth' lines")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--window", type=int, default=7)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("centiloid", help="CTX SUVr and Centiloid of an SUV map")
    p.add_argument("--suv", required=True)
    p.add_argument("--cereb", required=True)
    p.add_argument("--ctx", required=True)
    p.add_argument("--anchors", default="1.008,1.996", help="yc,ad SUVr anchors")
    p.set_defaults(func=cmd_centiloid)

    p = sub.add_parser("phantom", help="write a synthetic MRI/PET dataset")
    p.add_argument("--spec", help="phantom key = value file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--masks", action="store_true", help="also write cerebellum/ctx masks")
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except config_mod.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ShapeError as exc:
        log.error("shape error: %s", exc)
        return EXIT_SHAPE
    except (DataError, CheckpointError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (NumericError, SamplingError, FloatingPointError) as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
