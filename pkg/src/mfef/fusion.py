"""Feature fusion: regress every student's map to a common shape, concatenate,
mix through depthwise/pointwise transfer layers and classify."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .core_types import ConfigError, ShapeError, check_feature_map, vector_jacobian


@dataclass(frozen=True)
class FusionConfig:
    target_channels: int
    num_classes: int
    transfer_depth: int = 2

    def __post_init__(self):
        if self.target_channels < 1:
            raise ConfigError("target_channels must be >= 1")
        if self.transfer_depth < 1:
            raise ConfigError("transfer_depth must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


def _check_list(fm_list: Sequence[torch.Tensor]) -> None:
    if len(fm_list) == 0:
        raise ShapeError("fusion needs at least one feature map")
    batch = fm_list[0].shape[0]
    for i, fm in enumerate(fm_list):
        check_feature_map(fm, None, f"student {i} map")
        if fm.shape[0] != batch:
            raise ShapeError(f"student {i} batch {fm.shape[0]} != {batch}")


class Regressor(nn.Module):
    """1x1 conv + BN when channel counts differ, identity otherwise."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        if in_channels == out_channels:
            self.proj = nn.Identity()
        else:
            self.proj = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1, bias=False), nn.BatchNorm2d(out_channels))

    def forward(self, fm: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        if tuple(fm.shape[2:]) != tuple(size):
            fm = F.adaptive_avg_pool2d(fm, size)
        return self.proj(fm)


def regress_to_common(fm_list: Sequence[torch.Tensor], cfg: FusionConfig, regressors=None) -> list[torch.Tensor]:
    """Bring every map to ``(B, target_channels, H*, W*)`` with ``H*, W*`` the smallest present.

    ``regressors`` is the per-student list of :class:`Regressor`; when omitted,
    fresh ones are built (useful for shape checks only).
    """
    _check_list(fm_list)
    size = (min(fm.shape[2] for fm in fm_list), min(fm.shape[3] for fm in fm_list))
    if regressors is None:
        regressors = [Regressor(fm.shape[1], cfg.target_channels).to(fm.dtype) for fm in fm_list]
    if len(regressors) != len(fm_list):
        raise ShapeError(f"{len(fm_list)} maps but {len(regressors)} regressors")
    out = []
    for fm, reg in zip(fm_list, regressors):
        if fm.shape[1] != reg.in_channels:
            raise ShapeError(f"map has {fm.shape[1]} channels, regressor expects {reg.in_channels}")
        out.append(reg(fm, size))
    return out


class FeatureFusion(nn.Module):
    def __init__(self, in_channels: Sequence[int], cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.in_channels = list(in_channels)
        self.regressors = nn.ModuleList(Regressor(c, cfg.target_channels) for c in in_channels)
        width = len(self.in_channels) * cfg.target_channels
        layers = []
        for _ in range(cfg.transfer_depth):
            layers += [
                nn.Conv2d(width, width, 3, padding=1, groups=width, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(),
                nn.Conv2d(width, width, 1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(),
            ]
        self.transfer = nn.Sequential(*layers)
        self.classifier = nn.Linear(width, cfg.num_classes)

    @property
    def transfer_width(self) -> int:
        return len(self.in_channels) * self.cfg.target_channels

    def forward(self, fm_list: Sequence[torch.Tensor]):
        if len(fm_list) != len(self.in_channels):
            raise ShapeError(f"fusion built for {len(self.in_channels)} students, got {len(fm_list)} maps")
        common = regress_to_common(fm_list, self.cfg, self.regressors)
        fused = self.transfer(torch.cat(common, dim=1))
        logits = self.classifier(fused.mean(dim=(2, 3)))
        return fused, logits


def fuse_forward(module: FeatureFusion, fm_list):
    return module(fm_list)


def fuse_backward(module: FeatureFusion, fm_list, upstream):
    """``upstream`` is the gradient w.r.t. the fusion logits, or a
    ``(fused_grad, logits_grad)`` pair. Returns ``(per_input_grads, param_grads)``."""
    if isinstance(upstream, torch.Tensor):
        def fn(*xs):
            return module(list(xs))[1]
    else:
        def fn(*xs):
            return module(list(xs))
    return vector_jacobian(module, fn, list(fm_list), upstream)
