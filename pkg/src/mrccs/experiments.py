"""Desk-scale experiments: overfitting a few fixed patches and the ratio sweep.

Both run on crops of scikit-image's bundled sample photographs, so they need
no dataset download.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import BUNDLED_HELD_OUT, BUNDLED_TRAIN, bundled_images, tile_corpus
from .metrics import psnr
from .sensing import parse_ratio
from .train import FixedPatches, RandomCrops, TrainConfig, ratio_label, train

OVERFIT_TARGET_DB = 35.0
SWEEP_RATIOS = ("1/16", "1/8", "1/4", "1/2")


@torch.no_grad()
def mean_psnr(model, patches: torch.Tensor) -> float:
    """Mean per-patch PSNR of x_hat over a (N, 1, H, W) stack."""
    refined = model(patches).refined
    return float(np.mean([psnr(x, y) for x, y in zip(patches, refined)]))


def overfit_patches(count: int = 8, size: int = 96, seed: int = 0) -> torch.Tensor:
    return torch.stack(tile_corpus(bundled_images(BUNDLED_TRAIN), count, size, seed))


@dataclass
class OverfitResult:
    steps: int
    psnr_db: float
    seconds: float
    history: list[tuple[int, float]] = field(default_factory=list)

    def reached(self, target: float = OVERFIT_TARGET_DB) -> bool:
        return self.psnr_db >= target


def overfit(config: TrainConfig, patches: torch.Tensor, max_steps: int = 2000,
            target_db: float = OVERFIT_TARGET_DB, eval_every: int = 100,
            time_limit: float | None = None) -> OverfitResult:
    """Train on ``patches`` until their mean PSNR reaches ``target_db`` or the budget runs out.

    One long epoch keeps the learning rate at its base value throughout.
    """
    config = dataclasses.replace(config, epochs=1, steps_per_epoch=max_steps)
    history = []
    start = time.perf_counter()

    def stop(step, model):
        if step % eval_every and step != max_steps:
            return False
        history.append((step, mean_psnr(model, patches)))
        if history[-1][1] >= target_db:
            return True
        return time_limit is not None and time.perf_counter() - start > time_limit

    train(config, FixedPatches(patches, config.batch_size), stop=stop)
    step, db = history[-1]
    return OverfitResult(step, db, time.perf_counter() - start, history)


@dataclass
class SweepPoint:
    ratio: str
    psnr_db: float


def sweep_corpus(n_train: int = 64, train_size: int = 128, n_test: int = 16, patch: int = 96, seed: int = 0):
    """(training images, held-out patch stack) from disjoint source photographs."""
    train_images = tile_corpus(bundled_images(BUNDLED_TRAIN), n_train, train_size, seed)
    held_out = torch.stack(tile_corpus(bundled_images(BUNDLED_HELD_OUT), n_test, patch, seed + 1))
    return train_images, held_out


def ratio_sweep(base: TrainConfig, train_images, held_out: torch.Tensor, ratios=SWEEP_RATIOS,
                steps: int = 3000, log=None) -> list[SweepPoint]:
    """Held-out PSNR after an identical step budget at each ratio."""
    points = []
    for r in ratios:
        cfg = dataclasses.replace(base, ratio=str(parse_ratio(r)), epochs=1, steps_per_epoch=steps)
        source = RandomCrops(train_images, cfg.seed, cfg.batch_size, cfg.patch_size)
        model = train(cfg, source).model
        points.append(SweepPoint(ratio_label(r), mean_psnr(model, held_out)))
        if log is not None:
            log(f"{points[-1].ratio}: {points[-1].psnr_db:.4f} dB")
    return points


def inversions(values) -> list[float]:
    """Sizes of the drops between consecutive values."""
    return [a - b for a, b in zip(values, values[1:]) if b < a]


def monotone_enough(values, max_inversions: int = 1, tolerance_db: float = 0.1) -> bool:
    drops = inversions(values)
    return len(drops) <= max_inversions and all(d <= tolerance_db for d in drops)
