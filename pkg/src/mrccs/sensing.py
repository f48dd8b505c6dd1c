"""Learned linear sensing operators and sampling-ratio arithmetic.

Every sensor here is bias-free and activation-free, so each one is a linear
map from a (1, H, W) image to (m, H / 2**k, W / 2**k) measurements.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .nn_core import Conv, ConvSpec, concat, mean_pool

DEFAULT_FEATURES = 16
PAPER_RATIOS = tuple(Fraction(n, 64) for n in (1, 2, 4, 8, 16)) + (Fraction(1, 2),)
MATRIX_ENTRY_BUDGET = 1 << 26


class Variant(str, enum.Enum):
    GSM = "gsm"
    GSM_PLUS = "gsm_plus"
    SINGLE_CONV = "single_conv"
    SEQ_CONV = "seq_conv"


@dataclass(frozen=True)
class SensingPlan:
    variant: Variant
    k: int
    m: int
    feature_width: int = DEFAULT_FEATURES

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.k < 1 or self.m < 1 or self.feature_width < 1:
            raise ConfigError(f"invalid sensing plan {self}")

    @property
    def factor(self) -> int:
        """Spatial downsampling 2**k between image and measurements."""
        return 2**self.k

    @property
    def realized_ratio(self) -> Fraction:
        return Fraction(self.m, 4**self.k)

    def measurement_shape(self, height: int, width: int) -> tuple[int, int, int]:
        check_divisible(height, width, self.factor)
        return (self.m, height // self.factor, width // self.factor)


def parse_ratio(ratio) -> Fraction:
    """Accept Fraction, int/float, or strings like '6.25%', '1/16', '0.0625'."""
    if isinstance(ratio, Fraction):
        return ratio
    if isinstance(ratio, str):
        text = ratio.strip()
        if text.endswith("%"):
            return Fraction(text[:-1]) / 100
        return Fraction(text)
    if isinstance(ratio, float):
        return Fraction(ratio).limit_denominator(1 << 24)
    return Fraction(ratio)


def default_blocks(ratio: Fraction) -> int:
    # k=3 keeps m integral for every ratio up to 25%; 50% uses a single block
    return 3 if ratio <= Fraction(1, 4) else 1


def plan_sensing(ratio, variant=Variant.GSM_PLUS, feature_width: int = DEFAULT_FEATURES,
                 k: int | None = None) -> SensingPlan:
    r = parse_ratio(ratio)
    if not 0 < r <= 1:
        raise ConfigError(f"sampling ratio must lie in (0, 1], got {r}")
    k = default_blocks(r) if k is None else k
    m = r * 4**k
    if m.denominator != 1:
        lo, hi = int(m), int(m) + 1
        near = [f"{Fraction(v, 4**k)} ({100 * v / 4**k:.4f}%)" for v in (lo, hi) if v >= 1]
        raise ConfigError(
            f"ratio {r} is not m/4^{k} for integer m; nearest representable: {', '.join(near)}"
        )
    return SensingPlan(Variant(variant), k, int(m), feature_width)


def check_divisible(height: int, width: int, factor: int) -> None:
    if height % factor or width % factor:
        raise ConfigError(
            f"image {height}x{width} is not divisible by {factor}; pad it first (data.pad_to_multiple)"
        )


def _pool_to(x, times: int):
    for _ in range(times):
        x = mean_pool(x)
    return x


class Sensor(nn.Module):
    def __init__(self, plan: SensingPlan):
        super().__init__()
        self.plan = plan

    def forward(self, x):
        raise NotImplementedError

    def layer_graph(self) -> list[tuple]:
        """(kind, in_channels, out_channels, kernel, stride) per layer, in execution order."""
        raise NotImplementedError


class GSM(Sensor):
    """Stem, k stride-2 compaction convs, every level mean-pooled to the
    coarsest scale, concatenated, and sampled by one 1x1 conv."""

    def __init__(self, plan: SensingPlan, generator=None):
        super().__init__(plan)
        f = plan.feature_width
        self.stem = Conv(ConvSpec(1, f), generator, "linear")
        self.compact = nn.ModuleList(Conv(ConvSpec(f, f, stride=2), generator, "linear") for _ in range(plan.k))
        self.sample = Conv(ConvSpec((plan.k + 1) * f, plan.m, kernel=1), generator, "linear")

    def forward(self, x):
        k = self.plan.k
        feats = [self.stem(x)]
        for conv in self.compact:
            feats.append(conv(feats[-1]))
        levels = [_pool_to(f, k - depth) for depth, f in enumerate(feats)]
        return self.sample(concat(*levels))

    def layer_graph(self):
        f, k = self.plan.feature_width, self.plan.k
        graph = [("conv", 1, f, 3, 1)]
        for _ in range(k):
            graph += [("conv", f, f, 3, 2), ("pool", f, f, 2, 2)]
        graph.append(("fuse_concat", (k + 1) * f, (k + 1) * f, 0, 1))
        graph.append(("conv", (k + 1) * f, self.plan.m, 1, 1))
        return graph


class GSMPlus(Sensor):
    """Stem, then k residual blocks y <- conv_s2(y) + mean_pool(y), then a 1x1 sampler."""

    def __init__(self, plan: SensingPlan, generator=None):
        super().__init__(plan)
        f = plan.feature_width
        self.stem = Conv(ConvSpec(1, f), generator, "linear")
        self.blocks = nn.ModuleList(Conv(ConvSpec(f, f, stride=2), generator, "linear") for _ in range(plan.k))
        self.sample = Conv(ConvSpec(f, plan.m, kernel=1), generator, "linear")

    def forward(self, x):
        y = self.stem(x)
        for conv in self.blocks:
            y = conv(y) + mean_pool(y)
        return self.sample(y)

    def layer_graph(self):
        f = self.plan.feature_width
        graph = [("conv", 1, f, 3, 1)]
        for _ in range(self.plan.k):
            graph += [("conv", f, f, 3, 2), ("pool", f, f, 2, 2), ("fuse_add", f, f, 0, 1)]
        graph.append(("conv", f, self.plan.m, 1, 1))
        return graph


class SingleConv(Sensor):
    """One non-overlapping 2**k x 2**k conv with stride 2**k."""

    def __init__(self, plan: SensingPlan, generator=None):
        super().__init__(plan)
        b = plan.factor
        self.conv = Conv(ConvSpec(1, plan.m, kernel=b, stride=b, padding=0), generator, "linear")

    def forward(self, x):
        return self.conv(x)

    def layer_graph(self):
        b = self.plan.factor
        return [("conv", 1, self.plan.m, b, b)]


class SeqConv(Sensor):
    """Stem and k stride-2 convs, sampling only the deepest features."""

    def __init__(self, plan: SensingPlan, generator=None):
        super().__init__(plan)
        f = plan.feature_width
        self.stem = Conv(ConvSpec(1, f), generator, "linear")
        self.compact = nn.ModuleList(Conv(ConvSpec(f, f, stride=2), generator, "linear") for _ in range(plan.k))
        self.sample = Conv(ConvSpec(f, plan.m, kernel=1), generator, "linear")

    def forward(self, x):
        y = self.stem(x)
        for conv in self.compact:
            y = conv(y)
        return self.sample(y)

    def layer_graph(self):
        f = self.plan.feature_width
        return ([("conv", 1, f, 3, 1)] + [("conv", f, f, 3, 2)] * self.plan.k
                + [("conv", f, self.plan.m, 1, 1)])


SENSORS = {
    Variant.GSM: GSM,
    Variant.GSM_PLUS: GSMPlus,
    Variant.SINGLE_CONV: SingleConv,
    Variant.SEQ_CONV: SeqConv,
}


def build_sensor(plan: SensingPlan, generator: torch.Generator | None = None) -> Sensor:
    return SENSORS[plan.variant](plan, generator)


@dataclass
class Measurements:
    tensor: torch.Tensor
    plan: SensingPlan

    @property
    def shape(self):
        return tuple(self.tensor.shape)


def sense(x, sensor: Sensor) -> Measurements:
    check_divisible(x.shape[-2], x.shape[-1], sensor.plan.factor)
    if x.shape[-3] != 1:
        raise ConfigError(f"sensing expects a single luma channel, got shape {tuple(x.shape)}")
    return Measurements(sensor(x), sensor.plan)


def _sense_variant(x, sensor, allowed):
    if sensor.plan.variant not in allowed:
        raise ConfigError(f"sensor variant {sensor.plan.variant.value} not in {[v.value for v in allowed]}")
    return sense(x, sensor)


def gsm_sense(x, sensor: Sensor) -> Measurements:
    return _sense_variant(x, sensor, (Variant.GSM,))


def gsm_plus_sense(x, sensor: Sensor) -> Measurements:
    return _sense_variant(x, sensor, (Variant.GSM_PLUS,))


def baseline_sense(x, sensor: Sensor) -> Measurements:
    return _sense_variant(x, sensor, (Variant.SINGLE_CONV, Variant.SEQ_CONV))


@torch.no_grad()
def extract_matrix(sensor: Sensor, height: int, width: int, budget: int = MATRIX_ENTRY_BUDGET,
                   chunk: int = 256) -> np.ndarray:
    """Dense M x N matrix of the sensor by probing all N standard-basis images.

    Rows follow the (c, h, w) row-major order of the measurements, columns
    the row-major pixel order of the image.
    """
    m, mh, mw = sensor.plan.measurement_shape(height, width)
    rows, cols = m * mh * mw, height * width
    if rows * cols > budget:
        raise ConfigError(
            f"sensing matrix {rows}x{cols} needs {rows * cols * 4 / 2**20:.1f} MiB "
            f"(budget {budget} entries)"
        )
    param = next(sensor.parameters())
    phi = np.empty((rows, cols), dtype=np.float64)
    for start in range(0, cols, chunk):
        stop = min(start + chunk, cols)
        basis = torch.zeros(stop - start, 1, height * width, dtype=param.dtype)
        basis[torch.arange(stop - start), 0, torch.arange(start, stop)] = 1.0
        out = sensor(basis.reshape(-1, 1, height, width))
        phi[:, start:stop] = out.reshape(stop - start, rows).T.double().numpy()
    return phi
