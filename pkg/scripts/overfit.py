"""Overfit the default model on 8 fixed 96x96 crops and report training PSNR."""

import argparse

import torch

from mrccs.experiments import OVERFIT_TARGET_DB, overfit, overfit_patches
from mrccs.train import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--ratio", default="1/4")
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--target", type=float, default=OVERFIT_TARGET_DB)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = TrainConfig(ratio=args.ratio, seed=args.seed)
    result = overfit(cfg, overfit_patches(8, 96, args.seed), args.max_steps, args.target)
    for step, db in result.history:
        print(f"step {step:5d}  psnr {db:.2f} dB")
    print(f"{'reached' if result.reached(args.target) else 'missed'} {args.target} dB "
          f"after {result.steps} steps in {result.seconds:.0f} s")


if __name__ == "__main__":
    main()
