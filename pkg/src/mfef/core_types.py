"""Shared shape contracts and deterministic initialization.

Feature maps are plain ``torch.Tensor`` objects laid out ``(B, C, H, W)``;
logits and probability rows are ``(B, M)``. The helpers here check those
contracts and seed every learned weight from a named numpy generator so two
runs with the same seed start from bit-identical parameters.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

RNG_ALGORITHM = "PCG64"


class ShapeError(ValueError):
    """Raised when an array violates its shape contract."""


class ConfigError(ValueError):
    """Raised when a structural hyperparameter is inconsistent with its input."""


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def init_parameters(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a zero-mean normal array with standard deviation ``1/sqrt(fan_in)``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ShapeError(f"invalid parameter shape {shape}")
    if fan_in < 1:
        raise ShapeError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.Conv2d):
        return w.shape[1] * w.shape[2] * w.shape[3]
    return w.shape[1]


def reset_parameters(model: nn.Module, rng: np.random.Generator) -> nn.Module:
    """Re-initialize every conv/linear weight in registration order.

    Biases go to zero; normalization layers keep scale 1 and shift 0.
    """
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                arr = init_parameters(module.weight.shape, _fan_in(module), rng)
                module.weight.copy_(torch.from_numpy(arr))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()
    return model


def validate_feature_map(fm) -> bool:
    """True iff ``fm`` is a finite rank-4 array with every dimension >= 1."""
    t = torch.as_tensor(fm)
    if t.dim() != 4 or any(s < 1 for s in t.shape):
        return False
    if not t.is_floating_point():
        return True
    return bool(torch.isfinite(t).all())


def check_feature_map(fm: torch.Tensor, channels: int | None = None, name: str = "feature map") -> None:
    if not validate_feature_map(fm):
        raise ShapeError(f"{name} must be a finite (B, C, H, W) array, got shape {tuple(torch.as_tensor(fm).shape)}")
    if channels is not None and fm.shape[1] != channels:
        raise ShapeError(f"{name} has {fm.shape[1]} channels, expected {channels}")


def is_prob_dist(p: torch.Tensor, atol: float = 1e-6) -> bool:
    """Row-stochastic check for a ``(B, M)`` array."""
    if p.dim() != 2:
        return False
    if bool((p < 0).any()) or bool((p > 1).any()):
        return False
    sums = p.sum(dim=1)
    return bool(torch.all(torch.abs(sums - 1) <= atol))


def check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.dim() != 1:
        raise ShapeError(f"labels must be rank 1, got shape {tuple(labels.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ShapeError(f"labels must lie in [0, {num_classes})")


def vector_jacobian(module: nn.Module, forward, inputs, upstream):
    """Pull ``upstream`` back through ``forward(*inputs)``.

    Returns the gradient for each input (same order) and a dict of parameter
    gradients keyed by the module's parameter names. Parameters that do not
    influence the output get an all-zero gradient.
    """
    inputs = [x.detach().requires_grad_(True) for x in inputs]
    named = [(k, p) for k, p in module.named_parameters() if p.requires_grad]
    out = forward(*inputs)
    outs = out if isinstance(out, (tuple, list)) else (out,)
    ups = upstream if isinstance(upstream, (tuple, list)) else (upstream,)
    if len(outs) != len(ups):
        raise ShapeError(f"expected {len(outs)} upstream gradients, got {len(ups)}")
    for o, u in zip(outs, ups):
        if tuple(o.shape) != tuple(u.shape):
            raise ShapeError(f"upstream gradient shape {tuple(u.shape)} != output shape {tuple(o.shape)}")
    grads = torch.autograd.grad(
        outs, inputs + [p for _, p in named], grad_outputs=ups, allow_unused=True
    )
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, inputs + [p for _, p in named])]
    return grads[: len(inputs)], {k: g for (k, _), g in zip(named, grads[len(inputs):])}
