"""Measurements Reuse Block.

The block halves the current reconstruction features twice, then climbs back
to full resolution, fusing measurement-derived features at 1/4, 1/2 and full
scale. Each climb step concatenates the backbone feature with its reuse
feature, fuses, and concatenates the result with the down-path feature kept
from the same scale.
"""

from __future__ import annotations

import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .nn_core import Conv, ConvSpec, concat, depth_to_space


class MultiScaleReuse(nn.Module):
    """Map raw measurements (m, H/2^k, W/2^k) to y1 (C, H/4), y2 (C, H/2), y3 (C, H).

    All convs are bias-free, so zero measurements give zero features.
    """

    def __init__(self, m: int, k: int, channels: int, generator=None):
        super().__init__()
        c = channels
        self.k = k
        entry = []
        if k == 1:
            entry.append(Conv(ConvSpec(m, c, stride=2), generator))
        elif k == 2:
            entry.append(Conv(ConvSpec(m, c), generator))
        else:
            entry.append(Conv(ConvSpec(m, 4 * c), generator))
            entry.extend(Conv(ConvSpec(c, 4 * c), generator) for _ in range(k - 3))
        self.entry = nn.ModuleList(entry)
        self.up2 = Conv(ConvSpec(c, 4 * c), generator)
        self.up3 = Conv(ConvSpec(c, 4 * c), generator)

    def forward(self, y):
        h = y
        for conv in self.entry:
            h = conv(h)
            if self.k >= 3:
                h = depth_to_space(h, 2)
            h = F.relu(h)
        y1 = h
        y2 = F.relu(depth_to_space(self.up2(y1), 2))
        y3 = F.relu(depth_to_space(self.up3(y2), 2))
        return y1, y2, y3


def multi_scale_reuse(y, reuse: MultiScaleReuse):
    return reuse(y)


class MRB(nn.Module):
    """One Measurements Reuse Block operating on C-channel features.

    With ``reuse=False`` the measurement branch is dropped and the fusion convs
    see only backbone features; this is the no-MRB ablation baseline.
    """

    def __init__(self, channels: int, m: int, k: int, reuse: bool = True, generator=None):
        super().__init__()
        c = channels
        self.channels = c
        self.reuse = MultiScaleReuse(m, k, c, generator) if reuse else None
        fuse_in = 2 * c if reuse else c

        def conv(i, o, stride=1):
            return Conv(ConvSpec(i, o, stride=stride, has_bias=True), generator)

        self.down1 = conv(c, c, 2)
        self.down2 = conv(c, c, 2)
        self.fuse_quarter = conv(fuse_in, c)
        self.expand_quarter = conv(2 * c, 4 * c)
        self.fuse_half = conv(fuse_in, c)
        self.expand_half = conv(2 * c, 4 * c)
        self.fuse_full = conv(fuse_in, c)
        self.merge_full = conv(2 * c, c)

    def forward(self, f, y, trace: dict | None = None):
        c, h, w = f.shape[-3:]
        if c != self.channels:
            raise ConfigError(f"MRB input f_t has {c} channels, block built for {self.channels}")
        if h % 4 or w % 4:
            raise ConfigError(f"MRB input f_t {h}x{w} must be divisible by 4 (two halvings)")
        relu = F.relu

        f_d = relu(self.down1(f))
        f_dd = relu(self.down2(f_d))
        if self.reuse is not None:
            y1, y2, y3 = self.reuse(y)
            _check_stage("F1 (quarter-scale fusion)", f_dd, y1)
            _check_stage("F2 (half-scale fusion)", f_d, y2)
            _check_stage("F3 (full-scale fusion)", f, y3)
            quarter_in, half_extra, full_extra = (f_dd, y1), (y2,), (y3,)
        else:
            y1 = y2 = y3 = None
            quarter_in, half_extra, full_extra = (f_dd,), (), ()

        F1 = relu(self.fuse_quarter(concat(*quarter_in)))
        keep_quarter = (F1, f_dd)
        f_u = relu(depth_to_space(self.expand_quarter(concat(*keep_quarter)), 2))

        F2 = relu(self.fuse_half(concat(f_u, *half_extra)))
        keep_half = (F2, f_d)
        f_uu = relu(depth_to_space(self.expand_half(concat(*keep_half)), 2))

        F3 = relu(self.fuse_full(concat(f_uu, *full_extra)))
        keep_full = (F3, f)
        out = self.merge_full(concat(*keep_full))

        if trace is not None:
            trace.update(
                f_t=f, f_down=f_d, f_down2=f_dd, y1=y1, y2=y2, y3=y3,
                F1=F1, f_up=f_u, F2=F2, f_up2=f_uu, F3=F3, out=out,
                keep_quarter=keep_quarter, keep_half=keep_half, keep_full=keep_full,
            )
        return out


def _check_stage(stage, backbone, reused):
    if backbone.shape[-3:] != reused.shape[-3:]:
        raise ConfigError(
            f"MRB stage {stage}: backbone {tuple(backbone.shape[-3:])} vs "
            f"reuse {tuple(reused.shape[-3:])}"
        )


def mrb_forward(f, y, block: MRB, trace: dict | None = None):
    return block(f, y, trace)
