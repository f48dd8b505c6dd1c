"""Differentiable building blocks shared by the sensing and reconstruction nets.

Tensors are torch tensors laid out as (C, H, W) or batched (N, C, H, W).
Autograd and the convolution kernels come from torch; the optimizer and the
learning-rate schedule are implemented here.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, UsageError

ParamStore = OrderedDict[str, nn.Parameter]

LR_BASE = 1e-3
LR_MILESTONES = (60, 90, 120, 150, 180)
LR_GAMMA = 0.25
TOTAL_EPOCHS = 200


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    groups: int = 1
    has_bias: bool = False
    padding: int | None = None

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.kernel < 1:
            raise ConfigError(f"conv dims must be >= 1, got {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.padding is None and self.kernel % 2 == 0:
            raise ConfigError(f"even kernel {self.kernel} needs an explicit padding")

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding is None else self.padding

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.pad
        return (height + 2 * p - k) // s + 1, (width + 2 * p - k) // s + 1


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ConfigError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {tuple(x.shape)}")


def conv_forward(x, spec: ConvSpec, weight, bias=None):
    xb, squeeze = _batched(x)
    if xb.shape[1] != spec.in_channels:
        raise ConfigError(
            f"conv expects {spec.in_channels} input channels, got {xb.shape[1]} "
            f"(input shape {tuple(x.shape)})"
        )
    if tuple(weight.shape) != spec.weight_shape:
        raise ConfigError(f"weight shape {tuple(weight.shape)} != {spec.weight_shape}")
    if spec.has_bias != (bias is not None):
        raise ConfigError(f"has_bias={spec.has_bias} but bias is {'set' if bias is not None else 'missing'}")
    out = F.conv2d(xb, weight, bias, stride=spec.stride, padding=spec.pad, groups=spec.groups)
    return out.squeeze(0) if squeeze else out


def mean_pool(x, window: int = 2):
    xb, squeeze = _batched(x)
    h, w = xb.shape[-2:]
    if h % window or w % window:
        raise ConfigError(f"mean_pool needs dims divisible by {window}, got {h}x{w}")
    out = F.avg_pool2d(xb, window, window)
    return out.squeeze(0) if squeeze else out


def depth_to_space(x, r: int):
    """out[c, h*r + i, w*r + j] = in[c*r*r + i*r + j, h, w]."""
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if c % (r * r):
        raise ConfigError(f"depth_to_space: {c} channels not divisible by r^2={r * r}")
    out = xb.reshape(n, c // (r * r), r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    out = out.reshape(n, c // (r * r), h * r, w * r)
    return out.squeeze(0) if squeeze else out


def space_to_depth(x, r: int):
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if h % r or w % r:
        raise ConfigError(f"space_to_depth: {h}x{w} not divisible by r={r}")
    out = xb.reshape(n, c, h // r, r, w // r, r).permute(0, 1, 3, 5, 2, 4)
    out = out.reshape(n, c * r * r, h // r, w // r)
    return out.squeeze(0) if squeeze else out


def concat(*xs):
    return torch.cat(xs, dim=-3)


class Conv(nn.Module):
    """A conv layer described by a ConvSpec; Kaiming-uniform (fan-in) init, zero bias.

    ``gain`` names the nonlinearity the layer feeds ("relu" or "linear").
    """

    def __init__(self, spec: ConvSpec, generator: torch.Generator | None = None, gain: str = "relu"):
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(spec.weight_shape))
        nn.init.kaiming_uniform_(self.weight, mode="fan_in", nonlinearity=gain, generator=generator)
        self.bias = nn.Parameter(torch.zeros(spec.out_channels)) if spec.has_bias else None

    def forward(self, x):
        return conv_forward(x, self.spec, self.weight, self.bias)

    def extra_repr(self):
        s = self.spec
        return f"{s.in_channels}->{s.out_channels}, k={s.kernel}, stride={s.stride}, groups={s.groups}, bias={s.has_bias}"


def param_store(module: nn.Module) -> ParamStore:
    return OrderedDict(module.named_parameters())


def backward(loss, params: ParamStore) -> None:
    """Populate ``.grad`` of every parameter in ``params`` with d(loss)/d(param).

    Parameters the loss does not depend on receive zero gradients.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise UsageError("backward needs a loss produced by a recorded forward pass")
    if loss.numel() != 1:
        raise UsageError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    tensors = list(params.values())
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    for p, g in zip(tensors, grads):
        p.grad = torch.zeros_like(p) if g is None else g.detach()


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params, state: AdamState, lr: float) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise UsageError(f"parameter {name!r} has no gradient; call backward first")
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m / bc1, denom, value=-lr)


def lr_at_epoch(epoch: int, base: float = LR_BASE, milestones=LR_MILESTONES,
                gamma: float = LR_GAMMA, epochs: int = TOTAL_EPOCHS) -> float:
    if not 0 <= epoch < epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {epochs})")
    passed = sum(1 for e in milestones if e <= epoch)
    return base * gamma**passed


def lcm(a: int, b: int) -> int:
    return a * b // math.gcd(a, b)
