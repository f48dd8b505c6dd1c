"""Held-out PSNR versus sampling ratio after an identical short training budget."""

import argparse

import torch

from mrccs.experiments import SWEEP_RATIOS, inversions, monotone_enough, ratio_sweep, sweep_corpus
from mrccs.train import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", nargs="+", default=list(SWEEP_RATIOS))
    args = p.parse_args()
    torch.set_num_threads(1)
    base = TrainConfig(channels=args.channels, num_blocks=args.blocks, features=args.features, seed=args.seed)
    train_images, held_out = sweep_corpus(seed=args.seed)
    points = ratio_sweep(base, train_images, held_out, args.ratios, args.steps, log=print)
    values = [pt.psnr_db for pt in points]
    print("drops:", [round(d, 4) for d in inversions(values)], "monotone:", monotone_enough(values))


if __name__ == "__main__":
    main()
