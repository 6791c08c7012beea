"""CIFAR-style residual students split into a shared trunk and private branches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_types import ConfigError, ShapeError, reset_parameters


@dataclass(frozen=True)
class ArchSpec:
    name: str
    stem_width: int
    widths: tuple[int, ...]
    blocks: tuple[int, ...]
    num_classes: int = 10
    in_channels: int = 3

    @property
    def last_channels(self) -> int:
        return self.widths[-1]

    def trunk_key(self) -> tuple:
        return (self.in_channels, self.stem_width, self.widths[0], self.blocks[0])


_ARCHS = {
    "tiny-res-8": dict(stem_width=8, widths=(8, 16, 32), blocks=(1, 1, 1)),
    "res-20": dict(stem_width=16, widths=(16, 32, 64), blocks=(3, 3, 3)),
    "res-32": dict(stem_width=16, widths=(16, 32, 64), blocks=(5, 5, 5)),
    "res-56": dict(stem_width=16, widths=(16, 32, 64), blocks=(9, 9, 9)),
    "res-110": dict(stem_width=16, widths=(16, 32, 64), blocks=(18, 18, 18)),
    # basic-block stand-in for WRN-16-2 widths; used for heterogeneous cohorts
    "wrn-16-2": dict(stem_width=16, widths=(32, 64, 128), blocks=(2, 2, 2)),
}

ARCH_NAMES = tuple(_ARCHS)


def arch_spec(name: str, num_classes: int = 10, in_channels: int = 3) -> ArchSpec:
    try:
        params = _ARCHS[name]
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; known: {', '.join(_ARCHS)}") from None
    return ArchSpec(name=name, num_classes=num_classes, in_channels=in_channels, **params)


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _stage(c_in: int, c_out: int, n_blocks: int, stride: int) -> nn.Sequential:
    layers = [BasicBlock(c_in, c_out, stride)]
    layers += [BasicBlock(c_out, c_out, 1) for _ in range(n_blocks - 1)]
    return nn.Sequential(*layers)


class SharedTrunk(nn.Module):
    """Stem convolution plus the first residual stage."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, spec.stem_width, 3, padding=1, bias=False),
            nn.BatchNorm2d(spec.stem_width),
            nn.ReLU(),
        )
        self.stage1 = _stage(spec.stem_width, spec.widths[0], spec.blocks[0], 1)

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected (B, {self.spec.in_channels}, H, W) images, got {tuple(images.shape)}")
        return self.stage1(self.stem(images))


class StudentBranch(nn.Module):
    """Residual stages after the trunk, then global pooling and a linear head."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        stages = []
        for i in range(1, len(spec.widths)):
            stages.append(_stage(spec.widths[i - 1], spec.widths[i], spec.blocks[i], 2))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(spec.last_channels, spec.num_classes)

    @property
    def last_stage_channels(self) -> int:
        return self.spec.last_channels

    def features(self, h):
        return self.stages(h)

    def classify(self, fm):
        return self.head(fm.mean(dim=(2, 3)))

    def forward(self, h):
        fm = self.features(h)
        return fm, self.classify(fm)


class Cohort(nn.Module):
    """``n`` students; trunks are shared when every spec has the same trunk shape."""

    def __init__(self, specs: Sequence[ArchSpec], share_trunk: bool = True):
        super().__init__()
        if len(specs) < 2:
            raise ConfigError("a cohort needs at least two students")
        self.specs = list(specs)
        shared = share_trunk and len({s.trunk_key() for s in specs}) == 1
        if shared:
            self.trunks = nn.ModuleList([SharedTrunk(specs[0])])
            self.trunk_index = [0] * len(specs)
        else:
            self.trunks = nn.ModuleList(SharedTrunk(s) for s in specs)
            self.trunk_index = list(range(len(specs)))
        self.branches = nn.ModuleList(StudentBranch(s) for s in specs)

    @property
    def shared(self) -> bool:
        return len(self.trunks) == 1

    def __len__(self):
        return len(self.branches)

    def forward(self, images):
        """Return per-student lists ``(feature_maps, logits)``."""
        cache = {}
        fms, zs = [], []
        for j, branch in enumerate(self.branches):
            t = self.trunk_index[j]
            if t not in cache:
                cache[t] = self.trunks[t](images)
            fm, z = branch(cache[t])
            fms.append(fm)
            zs.append(z)
        return fms, zs


def build_cohort(specs: Sequence[ArchSpec | str], rng: np.random.Generator, num_classes: int | None = None,
                 share_trunk: bool = True) -> Cohort:
    resolved = []
    for s in specs:
        if isinstance(s, str):
            s = arch_spec(s, num_classes=num_classes or 10)
        resolved.append(s)
    cohort = Cohort(resolved, share_trunk=share_trunk)
    reset_parameters(cohort, rng)
    return cohort


def student_forward(trunk: SharedTrunk, branch: StudentBranch, images):
    return branch(trunk(images))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
