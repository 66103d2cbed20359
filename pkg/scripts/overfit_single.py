"""Memorise one phantom: 200 train steps, then report the loss terms and train dice.

Usage: python3 scripts/overfit_single.py [--steps 200] [--lr 0.001] [--seed 0]
"""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from ggnet import tensor as T
from ggnet.data import PhantomParams, generate_phantom
from ggnet.metrics import overlap_metrics
from ggnet.network import GGNetParams, ModelConfig, TrainConfig, batch_loss, forward, infer, train_step


def overfit(steps=200, lr=0.001, seed=0, phantom_seed=0, model=None, log=None) -> dict:
    sample = generate_phantom(PhantomParams(seed=phantom_seed))
    params = GGNetParams.init(model or ModelConfig(), seed=seed, dtype="float32")
    cfg = TrainConfig(lr=lr, batch=1, augment=False, seed=seed)
    start = time.perf_counter()
    losses = []
    for step in range(steps):
        losses.append(train_step([sample], params, cfg))
        if log and (step % 20 == 0 or step == steps - 1):
            log(f"step {step:4d}  loss {losses[-1]:.5f}")
    parts: dict = {}
    with T.no_grad():
        out = forward(params, T.Tensor(sample.image[None].astype(np.float32)), training=True)
        final = batch_loss(out, [sample], params.cfg, parts=parts).item()
    dice = overlap_metrics(infer(params, sample.image), sample.mask)["dice"]
    return {
        "losses": losses,
        "final_loss": final,
        "parts": parts,
        "train_dice": dice,
        "seconds": time.perf_counter() - start,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.001)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    res = overfit(args.steps, args.lr, args.seed, log=print)
    print(f"final loss {res['final_loss']:.5f}  train dice {res['train_dice']:.4f}  ({res['seconds']:.0f}s)")
    print("  " + "  ".join(f"{k} {v:.4f}" for k, v in res["parts"].items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
