"""Sequential channel-then-spatial attention gates."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core_types import ConfigError, ShapeError, check_feature_map, vector_jacobian


@dataclass(frozen=True)
class AttentionConfig:
    reduction_ratio: int = 4
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be a positive odd integer, got {self.spatial_kernel}")


class DualAttention(nn.Module):
    def __init__(self, channels: int, config: AttentionConfig = AttentionConfig()):
        super().__init__()
        if channels % config.reduction_ratio:
            raise ConfigError(f"reduction_ratio {config.reduction_ratio} does not divide {channels} channels")
        self.channels = channels
        self.config = config
        hidden = channels // config.reduction_ratio
        # one MLP shared by the average and max descriptors
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        k = config.spatial_kernel
        self.spatial = nn.Conv2d(2, 1, k, padding=k // 2, bias=True)

    def channel_attention(self, fm: torch.Tensor):
        check_feature_map(fm, self.channels, "attention input")
        avg = fm.mean(dim=(2, 3))
        # max with indices so ties route gradient to the first maximum
        mx = fm.flatten(2).max(dim=2).values
        w = torch.sigmoid(self.mlp(avg) + self.mlp(mx))[:, :, None, None]
        return w, w * fm

    def spatial_attention(self, fm: torch.Tensor):
        check_feature_map(fm, None, "attention input")
        avg = fm.mean(dim=1, keepdim=True)
        mx = fm.max(dim=1, keepdim=True).values
        w = torch.sigmoid(self.spatial(torch.cat([avg, mx], dim=1)))
        return w, w * fm

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        _, out = self.channel_attention(fm)
        _, out = self.spatial_attention(out)
        return out


def channel_attention(block: DualAttention, fm: torch.Tensor):
    return block.channel_attention(fm)


def spatial_attention(block: DualAttention, fm: torch.Tensor):
    return block.spatial_attention(fm)


def dual_attention_forward(block: DualAttention, fm: torch.Tensor) -> torch.Tensor:
    return block(fm)


def dual_attention_backward(block: DualAttention, fm: torch.Tensor, upstream_grad: torch.Tensor):
    if upstream_grad.shape != fm.shape:
        raise ShapeError(f"upstream gradient shape {tuple(upstream_grad.shape)} != {tuple(fm.shape)}")
    (gx,), gp = vector_jacobian(block, block, [fm], upstream_grad)
    return gx, gp
