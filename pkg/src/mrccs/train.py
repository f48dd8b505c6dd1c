"""Losses, training loop, checkpoints, evaluation and the ablation matrix."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import BATCH_SIZE, PATCH_SIZE, crop, pad_to_multiple, sample_patches, save_png
from .errors import ConfigError, NumericError
from .metrics import MetricRow, psnr, ssim, write_metrics_csv
from .nn_core import AdamState, adam_step, backward, lr_at_epoch, param_store
from .reconstruction import MRCCSNet, ModelConfig, build_model
from .sensing import PAPER_RATIOS, SensingPlan, Variant, parse_ratio, plan_sensing

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "step", "loss", "lr")


@dataclass(frozen=True)
class TrainConfig:
    ratio: str = "1/16"
    variant: str = Variant.GSM_PLUS.value
    channels: int = 32
    num_blocks: int = 2
    features: int = 16
    reuse: bool = True
    zero_tail: bool = True
    epochs: int = 200
    batch_size: int = BATCH_SIZE
    steps_per_epoch: int = 400
    patch_size: int = PATCH_SIZE
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 20

    def __post_init__(self):
        object.__setattr__(self, "ratio", str(parse_ratio(self.ratio)))
        object.__setattr__(self, "variant", Variant(self.variant).value)
        for name in ("epochs", "batch_size", "steps_per_epoch", "patch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    @property
    def plan(self) -> SensingPlan:
        return plan_sensing(self.ratio, self.variant, self.features)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.plan, self.channels, self.num_blocks, self.reuse, self.zero_tail)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def ratio_label(ratio) -> str:
    return f"{float(parse_ratio(ratio)) * 100:g}%"


def _sq_err(a, b):
    return ((a - b) ** 2).sum()


def loss_terms(model: MRCCSNet, x) -> tuple[torch.Tensor, torch.Tensor]:
    """(l_int, l_deep): summed squared Frobenius errors of I(S(x)) and of x_hat."""
    out = model(x)
    return _sq_err(out.initial, x), _sq_err(out.refined, x)


def loss_initial(model, x):
    return loss_terms(model, x)[0]


def loss_deep(model, x):
    return loss_terms(model, x)[1]


def loss_total(model, x):
    l_int, l_deep = loss_terms(model, x)
    return l_deep + l_int


class RandomCrops:
    """Batch for step ``s`` is a pure function of (seed, s)."""

    def __init__(self, images, seed: int, batch_size: int = BATCH_SIZE, patch_size: int = PATCH_SIZE):
        self.images = list(images)
        self.seed = seed
        self.batch_size = batch_size
        self.patch_size = patch_size

    def __call__(self, step: int) -> torch.Tensor:
        return sample_patches(self.images, (self.seed, step), self.batch_size, self.patch_size).patches


class FixedPatches:
    """Cycle through a fixed stack of patches in order."""

    def __init__(self, patches: torch.Tensor, batch_size: int = BATCH_SIZE):
        if len(patches) % batch_size:
            raise ConfigError(f"{len(patches)} patches do not split into batches of {batch_size}")
        self.patches = patches
        self.batch_size = batch_size

    def __call__(self, step: int) -> torch.Tensor:
        n = len(self.patches) // self.batch_size
        i = step % n
        return self.patches[i * self.batch_size:(i + 1) * self.batch_size]


@dataclass
class LogRow:
    epoch: int
    step: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: MRCCSNet
    log: list[LogRow]
    checkpoints: list[Path] = field(default_factory=list)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.step, repr(r.loss), repr(r.lr)])


def train(config: TrainConfig, source, out_dir=None, model: MRCCSNet | None = None,
          stop=None) -> TrainResult:
    """Joint training of S, I and D on l_deep + l_int with Adam and the step schedule.

    ``source(step)`` yields the batch for a global step. Checkpoints go to
    ``out_dir`` every ``checkpoint_every`` epochs and at the end. ``stop(step,
    model)`` is called after every update; returning True ends training early.
    """
    model = build_model(config.model_config(), config.seed) if model is None else model
    params = param_store(model)
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, saved = [], []
    step = 0
    stopped = False
    for epoch in range(config.epochs):
        lr = lr_at_epoch(epoch, base=config.lr, epochs=config.epochs)
        total, done = 0.0, 0
        for _ in range(config.steps_per_epoch):
            x = source(step)
            loss = loss_total(model, x)
            if not torch.isfinite(loss):
                last = saved[-1] if saved else None
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}; last good checkpoint: {last}", last)
            backward(loss, params)
            adam_step(params, state, lr)
            total += loss.item()
            step += 1
            done += 1
            if stop is not None and stop(step, model):
                stopped = True
                break
        rows.append(LogRow(epoch, step, total / done, lr))
        log.info("epoch %d step %d loss %.6g lr %.3g", epoch, step, rows[-1].loss, lr)
        if out is not None:
            write_log(rows, out / "train_log.csv")
            if (epoch + 1) % config.checkpoint_every == 0 and not stopped:
                saved.append(ckpt.save_checkpoint(out / f"epoch_{epoch + 1:04d}.mrcc", model, config.to_dict()))
        if stopped:
            break
    if out is not None:
        saved.append(ckpt.save_checkpoint(out / "final.mrcc", model, config.to_dict()))
    return TrainResult(model, rows, saved)


def load_model(path) -> tuple[MRCCSNet, TrainConfig]:
    raw, records = ckpt.read_checkpoint(path)
    config = TrainConfig.from_dict(raw)
    model = build_model(config.model_config(), config.seed)
    ckpt.load_into(model, records)
    return model, config


@torch.no_grad()
def reconstruct_image(model, image: torch.Tensor) -> torch.Tensor:
    """x_hat for a (1, H, W) image of any size (reflect-padded, then cropped back)."""
    padded, record = pad_to_multiple(image, model.config.size_multiple)
    return crop(model(padded.unsqueeze(0)).refined[0], record)


@dataclass
class MetricsReport:
    rows: list[MetricRow]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def write_csv(self, path) -> None:
        write_metrics_csv(self.rows, path)


@torch.no_grad()
def evaluate(model, images, dataset: str, ratio: str, variant: str, out_dir=None) -> MetricsReport:
    """PSNR/SSIM per image; optionally writes reconstructions and |x - x_hat| maps as PNG."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "recon").mkdir(parents=True, exist_ok=True)
        (out / "residual").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, x in images:
        x_hat = reconstruct_image(model, x)
        rows.append(MetricRow(dataset, name, ratio, variant, psnr(x, x_hat), ssim(x, x_hat)))
        if out is not None:
            stem = Path(name).stem
            save_png(x_hat, out / "recon" / f"{stem}.png")
            save_png((x - x_hat).abs(), out / "residual" / f"{stem}.png")
    report = MetricsReport(rows)
    if out is not None:
        report.write_csv(out / "metrics.csv")
    return report


def evaluate_checkpoint(path, images, dataset: str, ratio=None, out_dir=None) -> MetricsReport:
    model, config = load_model(path)
    if ratio is not None and parse_ratio(ratio) != Fraction(config.ratio):
        raise ConfigError(f"checkpoint was trained at ratio {config.ratio}, requested {parse_ratio(ratio)}")
    model.eval()
    return evaluate(model, images, dataset, ratio_label(config.ratio), config.variant, out_dir)


ABLATION_VARIANTS = (
    ("baseline", Variant.SEQ_CONV, False),
    ("baseline+gsm_plus", Variant.GSM_PLUS, False),
    ("baseline+mrb", Variant.SEQ_CONV, True),
    ("gsm_plus+mrb", Variant.GSM_PLUS, True),
)


@dataclass
class AblationCell:
    variant: str
    ratio: str
    psnr: float
    ssim: float
    checkpoint: str


def ablation_matrix(base: TrainConfig, train_images, test_images, dataset: str, out_dir,
                    ratios=PAPER_RATIOS, variants=ABLATION_VARIANTS) -> list[AblationCell]:
    """Train and evaluate every (variant, ratio) cell; writes ablation.csv and ablation_cells.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for name, sensing, reuse in variants:
        for r in ratios:
            cfg = dataclasses.replace(base, ratio=str(r), variant=sensing.value, reuse=reuse)
            cell_dir = out / name / ratio_label(r).rstrip("%")
            source = RandomCrops(train_images, cfg.seed, cfg.batch_size, cfg.patch_size)
            result = train(cfg, source, cell_dir)
            report = evaluate(result.model, test_images, dataset, ratio_label(r), name)
            rel = result.checkpoints[-1].relative_to(out).as_posix()
            cells.append(AblationCell(name, ratio_label(r), report.mean_psnr, report.mean_ssim, rel))
    _write_ablation(cells, [ratio_label(r) for r in ratios], [v[0] for v in variants], out)
    return cells


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def _write_ablation(cells, ratios, variants, out: Path) -> None:
    by_key = {(c.variant, c.ratio): c for c in cells}
    flags = {name: (sensing == Variant.GSM_PLUS, reuse) for name, sensing, reuse in ABLATION_VARIANTS}
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "gsm_plus", "mrb"] + [f"{r}_{m}" for r in ratios for m in ("psnr", "ssim")])
        for v in variants:
            gsm_plus, mrb = flags.get(v, ("", ""))
            row = [v, int(gsm_plus), int(mrb)]
            for r in ratios:
                c = by_key[(v, r)]
                row += [_fmt(c.psnr), _fmt(c.ssim)]
            w.writerow(row)
    with open(out / "ablation_cells.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "ratio", "psnr_db", "ssim", "checkpoint"])
        for c in cells:
            w.writerow([c.variant, c.ratio, _fmt(c.psnr), _fmt(c.ssim), c.checkpoint])
