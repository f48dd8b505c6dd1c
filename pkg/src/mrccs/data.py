"""Image loading, luma conversion, eval resizing, patch sampling and padding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)

PATCH_SIZE = 96
BATCH_SIZE = 4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
EXPECTED_COUNTS = {"BSDS500-train400": 400, "Set5": 5, "Set14": 14, "BSDS100": 100}
EVAL_SIZES = {"Set5": (256, 256), "Set14": (256, 256), "BSDS100": (320, 480)}


@dataclass(frozen=True)
class DatasetSpec:
    root: Path
    name: str
    split: str = "test"

    @property
    def directory(self) -> Path:
        return Path(self.root) / self.name

    @property
    def expected_count(self) -> int | None:
        return EXPECTED_COUNTS.get(self.name)


def to_luma(rgb) -> torch.Tensor:
    """Full-range BT.601 luma of an 8-bit (H, W, 3) RGB array, as a (1, H, W) tensor in [0, 1]."""
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[-1] != 3 or a.dtype != np.uint8:
        raise DataError(f"expected 8-bit RGB (H, W, 3), got {a.dtype} {a.shape}")
    a = a.astype(np.float64)
    y = (0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]) / 255.0
    return torch.from_numpy(np.clip(y, 0.0, 1.0)).float().unsqueeze(0)


def load_luma(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return to_luma(rgb)


def eval_size(set_name: str, height: int, width: int) -> tuple[int, int]:
    if set_name not in EVAL_SIZES:
        raise DataError(f"unknown evaluation set {set_name!r}; known: {sorted(EVAL_SIZES)}")
    th, tw = EVAL_SIZES[set_name]
    if set_name == "BSDS100" and height > width:
        th, tw = tw, th
    return th, tw


def resize_for_eval(image: torch.Tensor, set_name: str) -> torch.Tensor:
    """Bicubic resize of a (1, H, W) luma image to the evaluation size of ``set_name``."""
    h, w = image.shape[-2:]
    th, tw = eval_size(set_name, h, w)
    if (h, w) == (th, tw):
        return image.clone()
    im = Image.fromarray(image.reshape(h, w).numpy().astype(np.float32), mode="F")
    out = np.asarray(im.resize((tw, th), Image.BICUBIC), dtype=np.float32)
    return torch.from_numpy(np.clip(out, 0.0, 1.0)).unsqueeze(0)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def write_manifest(spec: DatasetSpec, path=None, check_count: bool = True) -> Path:
    """Validate the image count of a named set and write one relative path per line."""
    files = list_images(spec.directory)
    expected = spec.expected_count
    if check_count and expected is not None and len(files) != expected:
        raise DataError(f"{spec.name}: expected {expected} images, found {len(files)}")
    path = Path(path) if path is not None else spec.directory / "manifest.txt"
    lines = [f"{spec.name}/{p.name}\n" for p in files]
    path.write_text("".join(lines))
    return path


def load_dataset(spec: DatasetSpec) -> list[tuple[str, torch.Tensor]]:
    """(file name, luma image) pairs in lexicographic order; test sets are resized."""
    out = []
    for p in list_images(spec.directory):
        img = load_luma(p)
        if spec.split == "test":
            img = resize_for_eval(img, spec.name)
        out.append((p.name, img))
    return out


@dataclass
class PatchBatch:
    patches: torch.Tensor
    seed: tuple
    flipped: list[bool] = field(default_factory=list)
    sources: list[int] = field(default_factory=list)


def _rng(seed) -> np.random.Generator:
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def sample_patches(images, seed, count: int = BATCH_SIZE, size: int = PATCH_SIZE) -> PatchBatch:
    """Uniform random crops with independent 50% horizontal flips; a pure function of ``seed``."""
    usable = [i for i, im in enumerate(images) if im.shape[-2] >= size and im.shape[-1] >= size]
    if len(usable) < len(images):
        log.warning("skipping %d image(s) smaller than %dx%d", len(images) - len(usable), size, size)
    if not usable:
        raise DataError(f"no image is at least {size}x{size}")
    rng = _rng(seed)
    patches, flips, sources = [], [], []
    for _ in range(count):
        idx = usable[int(rng.integers(len(usable)))]
        im = images[idx]
        top = int(rng.integers(im.shape[-2] - size + 1))
        left = int(rng.integers(im.shape[-1] - size + 1))
        patch = im[..., top:top + size, left:left + size]
        flip = bool(rng.random() < 0.5)
        if flip:
            patch = patch.flip(-1)
        patches.append(patch.reshape(1, size, size))
        flips.append(flip)
        sources.append(idx)
    return PatchBatch(torch.stack(patches).contiguous(), tuple(np.atleast_1d(seed).tolist()), flips, sources)


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int


def pad_to_multiple(image: torch.Tensor, f: int) -> tuple[torch.Tensor, CropRecord]:
    """Reflect-pad right and bottom up to the next multiple of ``f``."""
    h, w = image.shape[-2:]
    ph, pw = -h % f, -w % f
    record = CropRecord(h, w)
    if ph == 0 and pw == 0:
        return image, record
    a = image.numpy()
    pad = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
    return torch.from_numpy(np.pad(a, pad, mode="reflect")), record


def crop(image: torch.Tensor, record: CropRecord) -> torch.Tensor:
    return image[..., : record.height, : record.width]


BUNDLED_TRAIN = ("astronaut", "coffee", "chelsea", "rocket", "hubble_deep_field", "retina",
                 "immunohistochemistry", "moon", "brick", "grass", "gravel", "coins", "clock")
BUNDLED_HELD_OUT = ("camera", "cat")


def bundled_images(names=BUNDLED_TRAIN) -> list[torch.Tensor]:
    """Luma versions of scikit-image's bundled sample photographs (no download needed)."""
    from skimage import data as skdata

    out = []
    for name in names:
        a = getattr(skdata, name)()
        if a.ndim == 3:
            out.append(to_luma(a[..., :3]))
        else:
            out.append(torch.from_numpy(a.astype(np.float32) / 255.0).unsqueeze(0))
    return out


def tile_corpus(images, count: int, size: int, seed: int = 0) -> list[torch.Tensor]:
    """``count`` distinct size x size crops drawn round-robin from ``images``."""
    rng = _rng((seed, 7))
    out = []
    for i in range(count):
        im = images[i % len(images)]
        top = int(rng.integers(im.shape[-2] - size + 1))
        left = int(rng.integers(im.shape[-1] - size + 1))
        out.append(im[..., top:top + size, left:left + size].clone())
    return out


def save_png(image: torch.Tensor, path) -> None:
    a = image.detach().reshape(image.shape[-2], image.shape[-1]).clamp(0, 1).numpy()
    Image.fromarray(np.round(a * 255.0).astype(np.uint8), mode="L").save(path)
