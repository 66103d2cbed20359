"""Command-line entry point: generate, train, eval, infer, verify."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint
from .config import RunConfig, config_text, load_config
from .data import SegSample, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, NumericalError
from .metrics import aggregate, evaluate_pair, write_csv, write_json
from .network import GGNetParams, infer, predict_proba, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_VERIFY = 5


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    model = cfg.model
    if getattr(args, "no_ggb", False):
        model = dataclasses.replace(model, use_ggb=False)
    if getattr(args, "no_bd", False):
        model = dataclasses.replace(model, use_bd=False)
    if getattr(args, "no_guidance", False):
        model = dataclasses.replace(model, use_guidance=False)
    train_cfg = cfg.train
    if getattr(args, "epochs", None) is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    return dataclasses.replace(cfg, model=model, train=train_cfg)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(cfg: RunConfig, split: str) -> list[SegSample]:
    """Samples for ``split`` ("train" or "test"), from disk or freshly generated."""
    if cfg.data.root:
        return load_dataset(Path(cfg.data.root) / split)
    count = cfg.data.train_count if split == "train" else cfg.data.test_count
    seed = cfg.data.train_seed if split == "train" else cfg.data.test_seed
    return generate_dataset(cfg.phantom, count, seed=seed)


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    if args.count is not None:
        seed = cfg.phantom.seed if args.seed is None else args.seed
        save_dataset(generate_dataset(cfg.phantom, args.count, seed=seed), out)
        _log(f"wrote {args.count} samples to {out}")
        return EXIT_OK
    for split in ("train", "test"):
        count = cfg.data.train_count if split == "train" else cfg.data.test_count
        seed = cfg.data.train_seed if split == "train" else cfg.data.test_seed
        if args.seed is not None:
            seed += args.seed
        save_dataset(generate_dataset(cfg.phantom, count, seed=seed), out / split)
        _log(f"wrote {count} {split} samples to {out / split}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    samples = _split(cfg, "train")
    if args.resume:
        params = checkpoint.load(args.resume)
    else:
        params = GGNetParams.init(cfg.model_config(), seed=cfg.train.seed, dtype=cfg.train.dtype)
    (out / "config.ini").write_text(config_text(cfg))
    log_path = out / "loss.csv"
    mode = "a" if args.resume and log_path.exists() else "w"
    start = time.perf_counter()
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(["epoch", "lr", "loss"])

        def on_epoch(epoch, lr, loss):
            writer.writerow([epoch, repr(lr), repr(loss)])
            fh.flush()
            _log(f"epoch {epoch:3d}  lr {lr:.2e}  loss {loss:.5f}  ({time.perf_counter() - start:.0f}s)")

        train(params, samples, cfg.train, cfg.loss, on_epoch=on_epoch)
    checkpoint.save(params, out / "model.ggnt")
    _log(f"{params.cfg.variant()}: {params.count()} parameters, checkpoint {out / 'model.ggnt'}")
    return EXIT_OK


def evaluate(params: GGNetParams, samples: list[SegSample], folds=None):
    probs = predict_proba(params, np.stack([s.image for s in samples]))
    records = [evaluate_pair((probs[i, 0] > 0.5).astype(np.uint8), s.mask) for i, s in enumerate(samples)]
    return aggregate(records, folds=folds, ids=[s.id for s in samples])


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint {ckpt} not found")
    params = checkpoint.load(ckpt)
    wanted = _apply_overrides(cfg, args).model
    for flag, attr in (("no_ggb", "use_ggb"), ("no_bd", "use_bd"), ("no_guidance", "use_guidance")):
        if getattr(args, flag) and getattr(params.cfg, attr) != getattr(wanted, attr):
            raise ConfigError(f"--{flag.replace('_', '-')} given but checkpoint was trained with {attr}=True")
    out = _out_dir(args)
    report = evaluate(params, _split(cfg, args.split))
    write_csv(report, out / f"metrics_{args.split}.csv")
    write_json(report, out / f"metrics_{args.split}.json")
    _log(f"{params.cfg.variant()} on {args.split}: " + "  ".join(
        f"{k} {v:.4f}" for k, v in report.mean.items() if v is not None
    ))
    return EXIT_OK


def cmd_infer(args) -> int:
    params = checkpoint.load(args.checkpoint)
    out = _out_dir(args)
    for path in args.images:
        path = Path(path)
        with Image.open(path) as im:
            if im.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            img = np.asarray(im, dtype=np.float64)[None] / 255.0
        mask = infer(params, img, threshold=args.threshold)
        Image.fromarray(mask * 255).save(out / f"{path.stem}_mask.png")
    _log(f"wrote {len(args.images)} masks to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import report, run_checks

    results, elapsed = run_checks(fault=args.inject_fault)
    print(report(results, elapsed))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config (defaults apply to anything omitted)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default="runs/default", help="output directory")
    ablate = argparse.ArgumentParser(add_help=False)
    ablate.add_argument("--no-ggb", action="store_true", help="drop both guided non-local blocks")
    ablate.add_argument("--no-bd", action="store_true", help="drop the boundary heads and their losses")
    ablate.add_argument("--no-guidance", action="store_true", help="plain non-local blocks without guidance")

    parser = argparse.ArgumentParser(prog="ggnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic phantom dataset")
    p.add_argument("--count", type=int, help="write one flat split of this size instead of train/ and test/")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common, ablate], help="train and write a checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, ablate], help="metrics for a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="predict masks for PNG images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify", parents=[common], help="run the built-in numerical self-checks")
    p.add_argument("--inject-fault", choices=("softmax",), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        _log(f"data error: {e}")
        return EXIT_DATA
    except NumericalError as e:
        _log(f"numerical failure: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
