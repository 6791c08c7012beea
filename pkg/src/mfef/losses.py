"""Temperature softmax, cross-entropy, KL distillation and the combined objective.

Every function accepts ``torch.Tensor`` inputs so the same code serves the
reporting path and the differentiable training path.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .core_types import ShapeError

LOG_CLAMP = 1e-12


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


@dataclass
class LossBreakdown:
    l_ce_students: list[float]
    l_ce_fusion: float
    l_a_d: float
    l_f_d: float
    ramp_weight: float
    temperature: float
    total: float = field(default=float("nan"))

    def to_dict(self) -> dict:
        return asdict(self)


def softmax_t(z: torch.Tensor, T: float) -> torch.Tensor:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    # torch.softmax subtracts the row max internally
    return torch.softmax(z / T, dim=-1)


def log_softmax_t(z: torch.Tensor, T: float) -> torch.Tensor:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return torch.log_softmax(z / T, dim=-1)


def cross_entropy(p: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``-log p[label]`` with the log argument clamped at 1e-12."""
    picked = p.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(LOG_CLAMP)).mean()


def cross_entropy_logits(z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Same quantity as ``cross_entropy(softmax_t(z, 1), labels)`` without the clamp."""
    return F.cross_entropy(z, labels.long())


def kl_div(teacher: torch.Tensor, student: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``sum_m t_m log(t_m / s_m)``, with ``0 log 0 = 0``."""
    if teacher.shape != student.shape:
        raise ShapeError(f"teacher {tuple(teacher.shape)} vs student {tuple(student.shape)}")
    return (torch.xlogy(teacher, teacher) - torch.xlogy(teacher, student)).sum(dim=-1).mean()


def _kl_soft(teacher_p: torch.Tensor, student_z: torch.Tensor, T: float) -> torch.Tensor:
    # log-space student side; stable for confident logits
    return (torch.xlogy(teacher_p, teacher_p) - teacher_p * log_softmax_t(student_z, T)).sum(dim=-1).mean()


def aggregate_logits(z_list: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(z_list) == 0:
        raise ShapeError("aggregate_logits needs at least one logit array")
    shape = z_list[0].shape
    for z in z_list:
        if z.shape != shape:
            raise ShapeError(f"logit shapes differ: {tuple(z.shape)} vs {tuple(shape)}")
    return torch.stack(list(z_list)).mean(dim=0)


def loss_a_d(z_list, fusion_logits, T: float, teacher: torch.Tensor | None = None) -> torch.Tensor:
    """Students' aggregate teaches the fusion classifier; the aggregate is a constant target.

    ``teacher`` overrides the soft target (used to freeze it for finite differences).
    """
    if teacher is None:
        teacher = softmax_t(aggregate_logits(z_list).detach(), T)
    return _kl_soft(teacher, fusion_logits, T)


def loss_f_d(fusion_logits, z_list, T: float, teacher: torch.Tensor | None = None) -> torch.Tensor:
    """The fusion classifier teaches every student; its distribution is a constant target."""
    if teacher is None:
        teacher = softmax_t(fusion_logits.detach(), T)
    if len(z_list) == 0:
        raise ShapeError("loss_f_d needs at least one student")
    return sum(_kl_soft(teacher, z, T) for z in z_list)


def ramp_weight(epoch: float, alpha: float, kind: str = "exp") -> float:
    """Distillation weight growing from ~0 to 1 over the first ``alpha`` epochs.

    ``kind="exp"`` is ``exp(-5 (1 - t)^2)`` with ``t = min(epoch, alpha) / alpha``;
    ``kind="linear"`` is ``t``.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    t = min(max(float(epoch), 0.0), alpha) / alpha
    if kind == "exp":
        return math.exp(-5.0 * (1.0 - t) ** 2)
    if kind == "linear":
        return t
    raise ValueError(f"unknown ramp kind {kind!r}")


def combine(ce_students, ce_fusion, l_a_d, l_f_d, ramp: float, T: float):
    """``sum(CE) + ramp * T^2 * (L_a^D + L_f^D)``; works on floats and tensors alike."""
    l_ce = sum(ce_students) + ce_fusion
    return l_ce + ramp * (T * T) * (l_a_d + l_f_d)


def _check_finite(name: str, value) -> None:
    v = value.detach() if isinstance(value, torch.Tensor) else torch.tensor(float(value))
    if not bool(torch.isfinite(v).all()):
        raise NonFiniteLossError(name, float(v))


def check_parts(ce_students, ce_fusion, l_a_d, l_f_d) -> None:
    for j, ce in enumerate(ce_students):
        _check_finite(f"l_ce_student_{j}", ce)
    _check_finite("l_ce_fusion", ce_fusion)
    _check_finite("l_a_d", l_a_d)
    _check_finite("l_f_d", l_f_d)


def total_loss(ce_students, ce_fusion, l_a_d, l_f_d, ramp: float, T: float) -> LossBreakdown:
    check_parts(ce_students, ce_fusion, l_a_d, l_f_d)
    ce_s = [float(c) for c in ce_students]
    parts = LossBreakdown(ce_s, float(ce_fusion), float(l_a_d), float(l_f_d), float(ramp), float(T))
    parts.total = combine(ce_s, parts.l_ce_fusion, parts.l_a_d, parts.l_f_d, parts.ramp_weight, parts.temperature)
    return parts
