"""Initial linear reconstruction, deep reconstruction, and the full model."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .mrb import MRB
from .nn_core import Conv, ConvSpec, depth_to_space, lcm
from .sensing import Measurements, SensingPlan, build_sensor, sense


@dataclass(frozen=True)
class ModelConfig:
    plan: SensingPlan
    channels: int = 32
    num_blocks: int = 2
    reuse: bool = True
    # start the residual branch at zero so the untrained model returns I(y)
    zero_tail: bool = True

    def __post_init__(self):
        if self.channels < 4 or self.channels % 4:
            raise ConfigError(f"deep channels C={self.channels} must be a positive multiple of 4")
        if self.num_blocks < 1:
            raise ConfigError(f"need at least one MRB, got T={self.num_blocks}")

    @property
    def size_multiple(self) -> int:
        return lcm(self.plan.factor, 4)


@dataclass
class ReconstructionOutput:
    measurements: Measurements
    initial: torch.Tensor
    refined: torch.Tensor


class InitialReconstruction(nn.Module):
    """Depth-wise channel expansion to 4**k channels, then depth-to-space by 2**k."""

    def __init__(self, plan: SensingPlan, generator=None):
        super().__init__()
        self.plan = plan
        target = 4**plan.k
        mult = -(-target // plan.m)
        self.expand = Conv(ConvSpec(plan.m, plan.m * mult, groups=plan.m), generator, "linear")
        # only reached for plans where 4**k / m is not an integer
        self.trim = None
        if plan.m * mult != target:
            self.trim = Conv(ConvSpec(plan.m * mult, target, kernel=1), generator, "linear")

    def forward(self, y):
        h = self.expand(y)
        if self.trim is not None:
            h = self.trim(h)
        return depth_to_space(h, self.plan.factor)


def initial_reconstruct(y: Measurements, net: InitialReconstruction):
    if y.tensor.shape[-3] != net.plan.m:
        raise ConfigError(f"measurements have {y.tensor.shape[-3]} channels, plan expects {net.plan.m}")
    return net(y.tensor)


class DeepReconstruction(nn.Module):
    def __init__(self, config: ModelConfig, generator=None):
        super().__init__()
        c, plan = config.channels, config.plan
        self.head = Conv(ConvSpec(1, c, has_bias=True), generator)
        self.blocks = nn.ModuleList(
            MRB(c, plan.m, plan.k, reuse=config.reuse, generator=generator)
            for _ in range(config.num_blocks)
        )
        self.tail = Conv(ConvSpec(c, 1, has_bias=True), generator, "linear")
        if config.zero_tail:
            nn.init.zeros_(self.tail.weight)

    def residual(self, init, y, traces: list | None = None):
        h, w = init.shape[-2:]
        if h % 4 or w % 4:
            raise ConfigError(f"deep reconstruction needs H, W divisible by 4, got {h}x{w}")
        f = F.relu(self.head(init))
        for block in self.blocks:
            trace = {} if traces is not None else None
            f = block(f, y, trace)
            if traces is not None:
                traces.append(trace)
        return self.tail(f)

    def forward(self, init, y):
        return init + self.residual(init, y)


def deep_reconstruct(init, y: Measurements, net: DeepReconstruction):
    return net(init, y.tensor)


class MRCCSNet(nn.Module):
    """Sensing S, initial reconstruction I, and deep reconstruction D with a global skip."""

    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.sensor = build_sensor(config.plan, generator)
        self.initial = InitialReconstruction(config.plan, generator)
        self.deep = DeepReconstruction(config, generator)

    def forward(self, x) -> ReconstructionOutput:
        h, w = x.shape[-2:]
        mult = self.config.size_multiple
        if h % mult or w % mult:
            raise ConfigError(f"input {h}x{w} must be divisible by {mult}; pad it first")
        y = sense(x, self.sensor)
        init = self.initial(y.tensor)
        return ReconstructionOutput(y, init, self.deep(init, y.tensor))

    def reconstruct(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(I(y), x_hat) from raw measurements."""
        init = self.initial(y)
        return init, self.deep(init, y)


def build_model(config: ModelConfig, seed: int = 0) -> MRCCSNet:
    gen = torch.Generator().manual_seed(seed)
    return MRCCSNet(config, gen)


def forward(x, model: MRCCSNet) -> ReconstructionOutput:
    return model(x)
