"""Directional ablation: baseline vs +GGB vs +GGB+BD over several seeds.

Usage: python3 scripts/run_ablation.py [--seeds 0 1 2] [--epochs 60] [--out runs/ablation]

The phantom split is fixed (train seed 100, test seed 200); the run seed
changes initialisation, shuffling and augmentation only.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from ggnet.cli import evaluate
from ggnet.config import RunConfig
from ggnet.data import generate_dataset
from ggnet.network import GGNetParams, train

VARIANTS = {
    "baseline": dict(use_ggb=False, use_bd=False),
    "ggb": dict(use_ggb=True, use_bd=False),
    "full": dict(use_ggb=True, use_bd=True),
}


def run(seeds, epochs=None, train_count=200, test_count=50, variants=tuple(VARIANTS), log=print) -> dict:
    cfg = RunConfig()
    train_cfg = cfg.train if epochs is None else dataclasses.replace(cfg.train, epochs=epochs)
    train_set = generate_dataset(cfg.phantom, train_count, seed=cfg.data.train_seed)
    test_set = generate_dataset(cfg.phantom, test_count, seed=cfg.data.test_seed)
    results: dict = {"epochs": train_cfg.epochs, "seeds": list(seeds), "dice": {}, "seconds": {}}
    start = time.perf_counter()
    for name in variants:
        model = dataclasses.replace(cfg.model_config(), **VARIANTS[name])
        results["dice"][name], results["seconds"][name] = [], []
        for seed in seeds:
            t0 = time.perf_counter()
            params = GGNetParams.init(model, seed=seed, dtype=train_cfg.dtype)
            train(params, train_set, dataclasses.replace(train_cfg, seed=seed), cfg.loss)
            dice = evaluate(params, test_set).mean["dice"]
            results["dice"][name].append(dice)
            results["seconds"][name].append(time.perf_counter() - t0)
            log(f"{name:<9} seed {seed}: test dice {dice:.4f}  ({time.perf_counter() - t0:.0f}s)")
    results["mean_dice"] = {k: float(np.mean(v)) for k, v in results["dice"].items()}
    results["total_seconds"] = time.perf_counter() - start
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--variants", nargs="+", choices=list(VARIANTS), default=list(VARIANTS))
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args(argv)
    res = run(args.seeds, args.epochs, variants=args.variants, log=lambda m: print(m, flush=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    m = res["mean_dice"]
    print("mean dice: " + "  ".join(f"{k} {v:.4f}" for k, v in m.items()))
    print(f"total {res['total_seconds'] / 60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
