"""Command-line entry point: ``mrccs <command> ...``.

Exit codes: 0 ok, 1 usage, 2 data validation, 3 config/shape mismatch,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .data import (EXPECTED_COUNTS, CropRecord, DatasetSpec, bundled_images, crop, list_images,
                   load_dataset, load_luma, pad_to_multiple, save_png, tile_corpus, write_manifest)
from .errors import ConfigError, DataError, NumericError, UsageError
from .train import FixedPatches, RandomCrops, TrainConfig, evaluate_checkpoint, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4

def _flag(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes", "on")


# config-file key -> (TrainConfig field or None for paths, parser)
CONFIG_KEYS = {
    "ratio": ("ratio", str),
    "variant": ("variant", str),
    "C": ("channels", int),
    "T": ("num_blocks", int),
    "F": ("features", int),
    "reuse": ("reuse", _flag),
    "zero_tail": ("zero_tail", _flag),
    "seed": ("seed", int),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "steps_per_epoch": ("steps_per_epoch", int),
    "patch_size": ("patch_size", int),
    "lr": ("lr", float),
    "checkpoint_every": ("checkpoint_every", int),
    "data_root": (None, str),
    "train_set": (None, str),
    "fixed_patches": (None, int),
}
BUNDLED_SET = "bundled"


class CliUsageError(Exception):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}; known: {', '.join(CONFIG_KEYS)}")
        values[key] = value
    return values


def effective_config(path, overrides: list[str] | None = None) -> dict[str, str]:
    values = parse_config_text(Path(path).read_text())
    for item in overrides or []:
        values.update(parse_config_text(item))
    if "seed" not in values and os.environ.get("MRCCS_SEED"):
        values["seed"] = os.environ["MRCCS_SEED"]
    return values


def train_config_from(values: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for key, raw in values.items():
        name, parse = CONFIG_KEYS[key]
        if name is not None:
            try:
                kwargs[name] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return TrainConfig(**kwargs)


def _echo_config(values: dict[str, str], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("".join(f"{k}={values[k]}\n" for k in sorted(values)))


def _parse_int(key, raw):
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _training_images(values):
    """Images named by data_root/train_set; train_set=bundled uses the scikit-image samples."""
    name = values.get("train_set")
    if name == BUNDLED_SET:
        return bundled_images()
    root = values.get("data_root")
    if not root or not name:
        raise CliUsageError(f"config needs data_root and train_set (or train_set={BUNDLED_SET})")
    images = [img for _, img in load_dataset(DatasetSpec(Path(root), name, split="train"))]
    if not images:
        raise DataError(f"no training images under {Path(root) / name}")
    return images


def cmd_prepare_data(args) -> int:
    spec = DatasetSpec(Path(args.root), args.set)
    files = list_images(spec.directory)
    expected = EXPECTED_COUNTS.get(args.set)
    if expected is not None and len(files) != expected:
        print(f"error: set {args.set}: expected {expected} images, found {len(files)}", file=sys.stderr)
        return EXIT_DATA
    path = write_manifest(spec, args.manifest)
    print(f"wrote {path} ({len(files)} images)")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config or not Path(args.config).is_file():
        raise CliUsageError(f"config file not found: {args.config}")
    values = effective_config(args.config, args.set)
    config = train_config_from(values)
    out = Path(args.out)
    _echo_config(values, out)
    images = _training_images(values)
    if "fixed_patches" in values:
        n = _parse_int("fixed_patches", values["fixed_patches"])
        patches = torch.stack(tile_corpus(images, n, config.patch_size, config.seed))
        source = FixedPatches(patches, config.batch_size)
    else:
        source = RandomCrops(images, config.seed, config.batch_size, config.patch_size)
    result = train(config, source, out)
    print(f"final loss {result.log[-1].loss:.6g}; checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    images = load_dataset(DatasetSpec(Path(args.root), args.set, split="test"))
    if not images:
        raise DataError(f"no images in {Path(args.root) / args.set}")
    out = Path(args.out)
    report = evaluate_checkpoint(args.ckpt, images, args.set, ratio=args.ratio, out_dir=out)
    print(f"{args.set}: {len(report.rows)} images, mean PSNR {report.mean_psnr:.4f} dB, "
          f"mean SSIM {report.mean_ssim:.4f}")
    return EXIT_OK


def cmd_sense(args) -> int:
    model, config = load_model(args.ckpt)
    image = load_luma(args.image)
    padded, record = pad_to_multiple(image, model.config.size_multiple)
    with torch.no_grad():
        y = model.sensor(padded.unsqueeze(0))[0]
    header = {"config": config.to_dict(), "image_height": record.height, "image_width": record.width,
              "padded_height": padded.shape[-2], "padded_width": padded.shape[-1]}
    ckpt.save_measurements(args.out, y, header)
    print(f"measurements {tuple(y.shape)} -> {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model, config = load_model(args.ckpt)
    if args.measurements:
        header, y = ckpt.read_measurements(args.measurements)
        if header["config"]["ratio"] != config.ratio or y.shape[0] != model.config.plan.m:
            raise ConfigError(f"measurement file plan ({header['config']['ratio']}, m={y.shape[0]}) "
                              f"does not match checkpoint ({config.ratio}, m={model.config.plan.m})")
        mult = model.config.size_multiple
        f = model.config.plan.factor
        if (y.shape[-2] * f) % mult or (y.shape[-1] * f) % mult:
            raise ConfigError(f"measurement grid {tuple(y.shape)} does not map to a size divisible by {mult}")
        record = CropRecord(header.get("image_height", y.shape[-2] * f), header.get("image_width", y.shape[-1] * f))
    elif args.image:
        image = load_luma(args.image)
        padded, record = pad_to_multiple(image, model.config.size_multiple)
        with torch.no_grad():
            y = model.sensor(padded.unsqueeze(0))[0]
    else:
        raise CliUsageError("reconstruct needs --measurements or --image")
    with torch.no_grad():
        _, x_hat = model.reconstruct(y.unsqueeze(0))
    x_hat = crop(x_hat[0], record)
    if not torch.isfinite(x_hat).all():
        raise NumericError("reconstruction contains non-finite values")
    save_png(x_hat, args.out)
    print(f"reconstruction {tuple(x_hat.shape)} -> {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = load_model(args.ckpt)
    model.eval()
    size = args.size
    mult = model.config.size_multiple
    if size % mult:
        raise ConfigError(f"--size {size} must be divisible by {mult}")
    x = torch.rand(1, 1, size, size, generator=torch.Generator().manual_seed(0))
    times = []
    with torch.no_grad():
        model(x)  # warm-up, excluded
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    for i, t in enumerate(times):
        print(f"run {i}: {t:.4f} s")
    med = statistics.median(times)
    print(f"median {size}x{size}: {med:.4f} s")
    if args.json:
        Path(args.json).write_text(json.dumps({"size": size, "times": times, "median": med}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrccs", description="image compressed sensing with global sensing and measurements reuse")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="validate a dataset directory and write its manifest")
    s.add_argument("--root", required=True)
    s.add_argument("--set", required=True, help=f"one of {', '.join(EXPECTED_COUNTS)}")
    s.add_argument("--manifest", help="output path (default <root>/<set>/manifest.txt)")
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train", help="train a model from a key=value config file")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--root", required=True)
    s.add_argument("--set", required=True)
    s.add_argument("--ratio", help="expected sampling ratio; mismatch exits 3")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sense", help="measure an image, writing an MRMS measurements file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sense)

    s = sub.add_parser("reconstruct", help="reconstruct a PNG from measurements (or directly from an image)")
    s.add_argument("--ckpt", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--measurements")
    g.add_argument("--image")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("bench", help="median forward time on a random square image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--json")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliUsageError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
