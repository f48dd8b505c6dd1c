"""Train and evaluate the four sensing/reuse variants at every ratio.

Without --root this runs a desk-scale version on crops of the bundled sample
photographs; with --root it trains on <root>/<train-set> and evaluates on
<root>/<test-set> using the given config for every cell.
"""

import argparse
import dataclasses
from pathlib import Path

import torch

from mrccs.cli import effective_config, train_config_from
from mrccs.data import DatasetSpec, load_dataset
from mrccs.experiments import sweep_corpus
from mrccs.train import TrainConfig, ablation_matrix


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config used for every cell")
    p.add_argument("--root")
    p.add_argument("--train-set", default="BSDS500-train400")
    p.add_argument("--test-set", default="Set5")
    p.add_argument("--steps", type=int, default=500, help="desk-scale steps per cell")
    args = p.parse_args()
    torch.set_num_threads(1)
    if args.root:
        base = train_config_from(effective_config(args.config)) if args.config else TrainConfig()
        train_images = [im for _, im in load_dataset(DatasetSpec(Path(args.root), args.train_set, "train"))]
        test_images = load_dataset(DatasetSpec(Path(args.root), args.test_set, "test"))
        dataset = args.test_set
    else:
        base = TrainConfig(channels=8, num_blocks=1, features=8, epochs=1, steps_per_epoch=args.steps)
        train_images, held_out = sweep_corpus()
        test_images = [(f"patch{i:02d}", x) for i, x in enumerate(held_out)]
        dataset = "bundled-held-out"
    cells = ablation_matrix(base, train_images, test_images, dataset, args.out)
    for c in cells:
        print(f"{c.variant:18s} {c.ratio:>8s}  {c.psnr:7.2f} dB  {c.ssim:.4f}")
    print(f"wrote {Path(args.out) / 'ablation.csv'}")


if __name__ == "__main__":
    main()
