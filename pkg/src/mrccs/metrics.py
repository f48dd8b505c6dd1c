"""PSNR and single-scale Gaussian-window SSIM on [0, 1] luma images."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
CSV_HEADER = ("dataset", "image", "ratio", "variant", "psnr_db", "ssim")


def _as_image(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    a = np.asarray(a, dtype=np.float64)
    a = np.squeeze(a)
    if a.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {a.shape}")
    return a


def _same_shape(x, y):
    x, y = _as_image(x), _as_image(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); returns math.inf for identical images."""
    x, y = _same_shape(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * math.log10(peak**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(a, g):
    a = sliding_window_view(a, g.size, axis=0) @ g
    return sliding_window_view(a, g.size, axis=1) @ g


def ssim_map(x, y, peak: float = 1.0) -> np.ndarray:
    x, y = _same_shape(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    vx = _filter_valid(x * x, g) - mx * mx
    vy = _filter_valid(y * y, g) - my * my
    cxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def ssim(x, y, peak: float = 1.0) -> float:
    return float(ssim_map(x, y, peak).mean())


@dataclass
class MetricRow:
    dataset: str
    image: str
    ratio: str
    variant: str
    psnr: float
    ssim: float

    def csv_fields(self):
        return [self.dataset, self.image, self.ratio, self.variant,
                f"{self.psnr:.4f}", f"{self.ssim:.4f}"]


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow(row.csv_fields())


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricRow(r["dataset"], r["image"], r["ratio"], r["variant"],
                          float(r["psnr_db"]), float(r["ssim"])) for r in reader]
