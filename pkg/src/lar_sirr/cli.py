"""Command-line entry points: synth, train, finetune, infer, eval, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__, imagecore, metrics, synth
from .checkpoint import CheckpointError, load_checkpoint
from .inference import ModelPredictor, identity_predictor
from .losses import LOSS_TERMS, ConfigurationError, LossWeights
from .model import ABLATIONS, ModelConfig
from .trainer import DataError, DataSources, NumericalError, TrainConfig, finetune, load_config_file, train

log = logging.getLogger("lar_sirr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
DATA_ENV = "LAR_SIRR_DATA_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Run manifest


def _timestamp():
    # SOURCE_DATE_EPOCH pins timestamps for reproducible reruns
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def artifact_version(configs):
    digest = hashlib.sha256(json.dumps(configs, sort_keys=True).encode()).hexdigest()[:12]
    return f"{__version__}+cfg.{digest}"


def write_manifest(out_dir, command, args, configs, extra=None, name="manifest.json"):
    """Record how this run was produced; always written before any artifact."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_paths": [str(args.config)] if getattr(args, "config", None) else [],
        "seed": getattr(args, "seed", None),
        "version": artifact_version(configs),
        "started": _timestamp(),
        "output_dir": str(out),
        "configs": configs,
    }
    manifest.update(extra or {})
    (out / name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Config assembly


def _configs(args):
    if getattr(args, "config", None):
        try:
            cfg = load_config_file(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config {args.config}: {exc}") from exc
    else:
        cfg = {"model": ModelConfig(), "train": TrainConfig(), "loss": LossWeights(), "augment": synth.AugmentConfig()}
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg["model"] = replace(cfg["model"], seed=seed)
        cfg["train"] = replace(cfg["train"], seed=seed)
    if getattr(args, "ablation", None):
        cfg["model"] = cfg["model"].with_ablations(args.ablation)
    if getattr(args, "drop_loss", None):
        cfg["loss"] = replace(cfg["loss"], drop=tuple(cfg["loss"].drop) + tuple(args.drop_loss))
    steps = getattr(args, "steps", None)
    if steps is not None:
        cfg["train"] = replace(cfg["train"], max_steps=steps)
    return cfg


def _configs_json(cfg):
    return {
        "model": cfg["model"].to_dict(),
        "train": cfg["train"].to_dict(),
        "loss": cfg["loss"].to_dict(),
        "augment": asdict(cfg["augment"]),
    }


def _data_root(value):
    if value:
        return Path(value)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    raise UsageError(f"no dataset given and {DATA_ENV} is unset")


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args):
    cfg = _configs(args)
    aug = cfg["augment"]
    if args.crop_size:
        aug = replace(aug, crop_size=args.crop_size)
    seed = args.seed if args.seed is not None else 0
    pool = _load_pool(args)
    ids = [synth.triple_id(i) for i in range(args.count)]
    configs = {"augment": asdict(aug)}
    write_manifest(args.out, "synth", args, configs, {"ids": ids, "count": args.count, "root_seed": seed})
    for i, tid in enumerate(ids):
        synth.write_triple(args.out, tid, synth.generate_triple(pool, seed, i, aug))
    print(f"wrote {args.count} triples to {args.out}")
    return EXIT_OK


def _load_pool(args):
    if args.pool:
        from .trainer import load_image_pool

        return load_image_pool(args.pool)
    if args.procedural:
        return synth.procedural_pool(args.procedural, size=max(args.crop_size or 0, 96) + 32, seed=args.seed or 0)
    raise UsageError("synth needs --pool DIR (or --procedural N for generated stand-in images)")


def _sources(args, cfg):
    synth_dir = args.data
    if synth_dir is None and not (args.pool or args.real):
        synth_dir = _data_root(None)
    return DataSources.from_dirs(synth_dir=synth_dir, pool_dir=args.pool, real_dir=args.real, augment=cfg["augment"])


def cmd_train(args):
    cfg = _configs(args)
    sources = _sources(args, cfg)
    write_manifest(args.out, "train", args, _configs_json(cfg))
    result = train(cfg["model"], cfg["train"], sources, cfg["loss"], out_dir=args.out)
    print(f"trained {result.step} steps; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_finetune(args):
    cfg = _configs(args)
    ckpt = load_checkpoint(args.checkpoint)
    model_cfg = cfg["model"] if args.config or args.ablation else None
    sources = _sources(args, cfg)
    configs = _configs_json(cfg)
    configs["model"] = ckpt.header["model_config"]
    write_manifest(args.out, "finetune", args, configs, {"checkpoint": str(args.checkpoint)})
    result = finetune(ckpt, cfg["train"], sources, cfg["loss"], out_dir=args.out, model_cfg=model_cfg)
    print(f"fine-tuned to step {result.step}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _inputs(path):
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if path.exists():
        return [path]
    raise DataError(f"no input at {path}")


def cmd_infer(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    predictor = ModelPredictor(model)
    inputs = _inputs(args.input)
    write_manifest(args.out, "infer", args, {"model": ckpt.header["model_config"]},
                   {"checkpoint": str(args.checkpoint), "inputs": [str(p) for p in inputs]})
    out = Path(args.out)
    done = 0
    for p in inputs:
        try:
            img = imagecore.read_png(p)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        result = predictor(img)
        imagecore.write_png(out / f"{p.stem}.png", result)
        if args.emit_trace:
            trace = predictor.last_trace
            for i in range(len(trace["T"])):
                imagecore.write_png(out / f"{p.stem}_T{i + 1}.png", trace["T"][i])
                imagecore.write_png(out / f"{p.stem}_R{i + 1}.png", trace["R"][i])
                imagecore.write_png(out / f"{p.stem}_C{i + 1}.png", trace["C"][i])
        done += 1
    if inputs and done == 0:
        raise DataError("no readable input images")
    print(f"wrote {done} result(s) to {out}")
    return EXIT_OK


def cmd_eval(args):
    root = _data_root(args.dataset)
    if args.identity:
        predictor, model_cfg = identity_predictor, None
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --identity")
        ckpt = load_checkpoint(args.checkpoint)
        predictor, model_cfg = ModelPredictor(ckpt.build_model()), ckpt.header["model_config"]
    write_manifest(args.out, "eval", args, {"model": model_cfg},
                   {"checkpoint": None if args.identity else str(args.checkpoint), "dataset": str(root)})
    out_images = Path(args.out) / "images" if args.save_images else None
    try:
        records = metrics.evaluate_tree(predictor, root, out_dir=out_images, crop=args.crop)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if not records or all(r.count == 0 for r in records):
        raise DataError(f"no scorable pairs under {root}")
    metrics.write_report(records, args.out)
    sys.stdout.write(metrics.format_table(records))
    return EXIT_OK


def cmd_inspect(args):
    try:
        img = imagecore.read_png(args.image)
    except OSError as exc:
        raise DataError(f"cannot read {args.image}: {exc}") from exc
    write_manifest(args.out, "inspect", args, {}, {"image": str(args.image)})
    gray = imagecore.to_grayscale(img)[:, :, :1]
    stem = Path(args.image).stem
    out = Path(args.out)
    imagecore.write_png(out / f"{stem}_inv_edge.png", 1.0 - imagecore.edge_map(gray))
    imagecore.write_png(out / f"{stem}_inv_laplacian.png", 1.0 - imagecore.laplacian_map(gray))
    print(f"wrote inverse edge and Laplacian maps to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _common(p, seed=True):
    p.add_argument("--config", help="JSON config with model/train/loss/augment sections")
    if seed:
        p.add_argument("--seed", type=int, help="seed for every stochastic choice")
    p.add_argument("--out", required=True, help="output directory")


def _training_flags(p):
    p.add_argument("--data", help=f"synthetic dataset directory (default: ${DATA_ENV})")
    p.add_argument("--pool", help="natural-image directory for on-the-fly synthesis")
    p.add_argument("--real", help="directory of real (I, T) pairs")
    p.add_argument("--ablation", action="append", choices=sorted(ABLATIONS), default=[],
                   help="architecture ablation (repeatable)")
    p.add_argument("--drop-loss", action="append", choices=list(LOSS_TERMS), default=[],
                   help="remove a loss term (repeatable)")
    p.add_argument("--steps", type=int, help="stop after this many optimization steps")


def build_parser():
    parser = _Parser(prog="lar-sirr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic training set")
    _common(p)
    p.add_argument("--pool", help="directory of natural images used as T and R sources")
    p.add_argument("--procedural", type=int, metavar="N", help="use N generated stand-in images instead of --pool")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--crop-size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from scratch")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training with the fine-tuning schedule")
    _common(p)
    _training_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="remove reflections from an image or directory")
    _common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--emit-trace", action="store_true", help="also write every iteration's T, R and C")
    p.add_argument("input")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM report over one or more datasets")
    _common(p, seed=False)
    p.add_argument("--checkpoint")
    p.add_argument("--identity", action="store_true", help="score the inputs themselves (baseline)")
    p.add_argument("--crop", type=int, default=0, help="border pixels excluded from scoring")
    p.add_argument("--save-images", action="store_true")
    p.add_argument("dataset", nargs="?", help=f"dataset root (default: ${DATA_ENV})")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="write inverse edge and Laplacian maps")
    _common(p, seed=False)
    p.add_argument("image")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
