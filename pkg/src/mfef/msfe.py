"""Multi-scale feature extraction.

The input map is cut into ``p`` channel groups. Group 1 goes straight to the
output. Every later group is convolved (after concatenation with the half
forwarded from the previous stage), then split: one half is exported, the
other is forwarded to the next stage. The last stage exports everything it
produces, sized so that the block preserves the channel count.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core_types import ConfigError, ShapeError, check_feature_map, vector_jacobian


@dataclass(frozen=True)
class MsfeConfig:
    groups: int = 4
    conv_kernel: int = 3

    def __post_init__(self):
        if self.groups < 2:
            raise ConfigError(f"groups must be >= 2, got {self.groups}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be a positive odd integer, got {self.conv_kernel}")

    def group_widths(self, channels: int) -> list[int]:
        w = channels // self.groups
        return [w] * (self.groups - 1) + [channels - w * (self.groups - 1)]


def split_halves(width: int) -> tuple[int, int]:
    """(forwarded, exported) widths; the forwarded half takes the odd channel."""
    return width - width // 2, width // 2


def stage_plan(channels: int, config: MsfeConfig) -> list[dict]:
    """Channel bookkeeping for stages 2..p.

    Each entry gives the conv's input width, output width, and how much of
    the output is forwarded / exported.
    """
    if channels < 2 * config.groups:
        raise ConfigError(f"need at least {2 * config.groups} channels for {config.groups} groups, got {channels}")
    widths = config.group_widths(channels)
    w = widths[0]
    exported = w
    forwarded = 0
    plan = []
    for k in range(1, config.groups):
        c_in = widths[k] + forwarded
        if k < config.groups - 1:
            fwd, exp = split_halves(w)
            plan.append(dict(c_in=c_in, c_out=w, forward=fwd, export=exp))
            exported += exp
            forwarded = fwd
        else:
            plan.append(dict(c_in=c_in, c_out=channels - exported, forward=0, export=channels - exported))
    return plan


def conv_bn_relu(c_in: int, c_out: int, kernel: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=False),
    )


class MultiScaleExtraction(nn.Module):
    """Channel-preserving divide/convolve/export/concatenate cascade."""

    def __init__(self, channels: int, config: MsfeConfig = MsfeConfig()):
        super().__init__()
        self.channels = channels
        self.config = config
        self.widths = config.group_widths(channels)
        self.plan = stage_plan(channels, config)
        self.stages = nn.ModuleList(
            conv_bn_relu(s["c_in"], s["c_out"], config.conv_kernel) for s in self.plan
        )

    def exported_widths(self) -> list[int]:
        return [self.widths[0]] + [s["export"] for s in self.plan]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_feature_map(x, self.channels, "MSFE input")
        k = self.config.conv_kernel
        if x.shape[2] < k or x.shape[3] < k:
            raise ConfigError(f"spatial size {tuple(x.shape[2:])} smaller than conv kernel {k}")
        groups = torch.split(x, self.widths, dim=1)
        outputs = [groups[0]]
        carry = None
        for i, (stage, plan) in enumerate(zip(self.stages, self.plan)):
            inp = groups[i + 1] if carry is None else torch.cat([groups[i + 1], carry], dim=1)
            y = stage(inp)
            if plan["forward"]:
                carry, exported = torch.split(y, [plan["forward"], plan["export"]], dim=1)
            else:
                exported = y
            outputs.append(exported)
        return torch.cat(outputs, dim=1)


def msfe_forward(block: MultiScaleExtraction, fm: torch.Tensor) -> torch.Tensor:
    return block(fm)


def msfe_backward(block: MultiScaleExtraction, fm: torch.Tensor, upstream_grad: torch.Tensor):
    """Return ``(input_grad, param_grads)`` for the scalar ``<block(fm), upstream_grad>``."""
    if upstream_grad.dim() != 4 or upstream_grad.shape != fm.shape:
        raise ShapeError(f"upstream gradient shape {tuple(upstream_grad.shape)} != {tuple(fm.shape)}")
    (gx,), gp = vector_jacobian(block, block, [fm], upstream_grad)
    return gx, gp


def receptive_field_of_stage(config: MsfeConfig, stage: int) -> int:
    """Spatial extent seen by stage ``stage`` (1-based) of the cascade."""
    if not 1 <= stage <= config.groups:
        raise ValueError(f"stage must lie in [1, {config.groups}], got {stage}")
    return 1 + (stage - 1) * (config.conv_kernel - 1)
