"""One-stage cohort training: students, multi-scale extraction, attention,
fusion classifier and the bidirectional distillation losses."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import losses as L
from .attention import AttentionConfig, DualAttention
from .core_types import ConfigError, RNG_ALGORITHM, check_labels, make_rng, reset_parameters
from .data import AugmentPolicy, LabeledSet, augment_batch, batches
from .fusion import FeatureFusion, FusionConfig
from .models import ArchSpec, Cohort, arch_spec
from .msfe import MsfeConfig, MultiScaleExtraction

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_FORMAT = "mfef-checkpoint"
CHECKPOINT_VERSION = 1

# case -> (use_msfe, use_dual_attention, use_okd)
ABLATION_CASES = {
    "A": (False, False, False),
    "B": (True, False, False),
    "C": (False, False, True),
    "D": (True, False, True),
    "E": (True, True, True),
}
CASE_LABELS = {
    "A": "Backbone",
    "B": "Backbone+MSFE",
    "C": "Backbone+OKD",
    "D": "Backbone+MSFE+OKD",
    "E": "Backbone+MSFE+DA+OKD",
}


@dataclass
class CohortConfig:
    n: int = 2
    temperature: float = 3.0
    alpha: float = 80.0
    ramp: str = "exp"
    epochs: int = 300
    batch_size: int = 128
    lr_initial: float = 0.1
    lr_milestones: tuple[int, ...] = (150, 225)
    lr_factor: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay_students: float = 1e-4
    weight_decay_fusion: float = 1e-5
    decay_norm: bool = False
    use_msfe: bool = True
    use_dual_attention: bool = True
    use_okd: bool = True
    msfe_groups: int = 4
    msfe_kernel: int = 3
    reduction_ratio: int = 4
    spatial_kernel: int = 7
    transfer_depth: int = 2

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.validate()

    def validate(self) -> None:
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        for name in ("temperature", "alpha", "lr_initial", "lr_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay_students < 0 or self.weight_decay_fusion < 0:
            raise ConfigError("momentum and weight decays must be non-negative")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"lr_milestones must be strictly increasing, got {list(ms)}")
        if ms and (ms[0] < 0 or ms[-1] >= self.epochs):
            raise ConfigError(f"lr_milestones must lie in [0, epochs={self.epochs}), got {list(ms)}")
        if self.ramp not in ("exp", "linear"):
            raise ConfigError(f"unknown ramp {self.ramp!r}")
        if self.use_dual_attention and not (self.use_msfe or self.use_okd):
            raise ConfigError("dual attention needs MSFE or OKD to have a consumer")
        MsfeConfig(self.msfe_groups, self.msfe_kernel)
        AttentionConfig(self.reduction_ratio, self.spatial_kernel)

    def with_case(self, case: str) -> "CohortConfig":
        try:
            msfe, da, okd = ABLATION_CASES[case]
        except KeyError:
            raise ConfigError(f"unknown ablation case {case!r}") from None
        d = asdict(self)
        d.update(use_msfe=msfe, use_dual_attention=da, use_okd=okd)
        return CohortConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cohort keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: CohortConfig) -> float:
    passed = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.lr_initial * cfg.lr_factor ** passed


class MFEFNetwork(nn.Module):
    """Students plus the training-time extraction/attention/fusion path.

    With OKD enabled, each student's head reads its raw last-stage map and the
    refined maps only feed the fusion classifier. Without OKD there is no
    fusion classifier, so an enabled extractor sits in front of the student
    head instead.
    """

    def __init__(self, specs: Sequence[ArchSpec], cfg: CohortConfig):
        super().__init__()
        if len(specs) != cfg.n:
            raise ConfigError(f"config says n={cfg.n} but {len(specs)} architectures were given")
        if len({s.num_classes for s in specs}) != 1:
            raise ConfigError("all students must share the class count")
        self.cfg = cfg
        self.num_classes = specs[0].num_classes
        # without OKD the students are independent networks
        self.cohort = Cohort(specs, share_trunk=cfg.use_okd)
        channels = [s.last_channels for s in specs]
        self.extractors = None
        self.attentions = None
        self.fusion = None
        if cfg.use_msfe:
            mc = MsfeConfig(cfg.msfe_groups, cfg.msfe_kernel)
            self.extractors = nn.ModuleList(MultiScaleExtraction(c, mc) for c in channels)
        if cfg.use_dual_attention:
            ac = AttentionConfig(cfg.reduction_ratio, cfg.spatial_kernel)
            self.attentions = nn.ModuleList(DualAttention(c, ac) for c in channels)
        if cfg.use_okd:
            fc = FusionConfig(min(channels), self.num_classes, cfg.transfer_depth)
            self.fusion = FeatureFusion(channels, fc)

    def refine(self, j: int, fm: torch.Tensor) -> torch.Tensor:
        if self.extractors is not None:
            fm = self.extractors[j](fm)
        if self.attentions is not None:
            fm = self.attentions[j](fm)
        return fm

    def forward(self, images: torch.Tensor) -> dict:
        cohort = self.cohort
        fms, zs = [], []
        trunk_out = {}
        for j, branch in enumerate(cohort.branches):
            t = cohort.trunk_index[j]
            if t not in trunk_out:
                trunk_out[t] = cohort.trunks[t](images)
            fm = branch.features(trunk_out[t])
            if not torch.isfinite(fm).all():
                # divergence shows up here before any loss term is formed
                raise L.NonFiniteLossError(f"features[{j}]", float(fm.detach().abs().max()))
            fms.append(fm)
            head_in = fm if self.fusion is not None else self.refine(j, fm)
            zs.append(branch.classify(head_in))
        out = {"features": fms, "logits": zs, "fusion_logits": None}
        if self.fusion is not None:
            refined = [self.refine(j, fm) for j, fm in enumerate(fms)]
            _, out["fusion_logits"] = self.fusion(refined)
            out["refined"] = refined
        return out

    def student_parameters(self):
        return list(self.cohort.parameters())

    def auxiliary_modules(self):
        return [m for m in (self.extractors, self.attentions, self.fusion) if m is not None]


def compute_losses(out: dict, labels: torch.Tensor, ramp: float, T: float, teachers: dict | None = None):
    """Return ``(total tensor, parts)`` for one forward pass.

    ``teachers`` may pin the soft targets ``{"aggregate": p, "fusion": p}``
    (finite-difference checks freeze them this way).
    """
    teachers = teachers or {}
    zs = out["logits"]
    zf = out["fusion_logits"]
    ce_s = [L.cross_entropy_logits(z, labels) for z in zs]
    zero = zs[0].new_zeros(())
    if zf is None:
        ce_f = a_d = f_d = zero
    else:
        ce_f = L.cross_entropy_logits(zf, labels)
        a_d = L.loss_a_d(zs, zf, T, teacher=teachers.get("aggregate"))
        f_d = L.loss_f_d(zf, zs, T, teacher=teachers.get("fusion"))
    L.check_parts(ce_s, ce_f, a_d, f_d)
    total = L.combine(ce_s, ce_f, a_d, f_d, ramp, T)
    L._check_finite("total", total)
    return total, (ce_s, ce_f, a_d, f_d)


def _is_norm(module: nn.Module) -> bool:
    return isinstance(module, (nn.BatchNorm2d, nn.BatchNorm1d, nn.GroupNorm, nn.LayerNorm))


def _param_groups(net: MFEFNetwork, cfg: CohortConfig) -> list[dict]:
    def split(modules, wd):
        decay, no_decay = [], []
        for mod in modules:
            for m in mod.modules():
                for p in m.parameters(recurse=False):
                    (no_decay if _is_norm(m) and not cfg.decay_norm else decay).append(p)
        groups = [dict(params=decay, weight_decay=wd, name="decay")]
        if no_decay:
            groups.append(dict(params=no_decay, weight_decay=0.0, name="norm"))
        return groups

    groups = split([net.cohort], cfg.weight_decay_students)
    aux = net.auxiliary_modules()
    if aux:
        groups += split(aux, cfg.weight_decay_fusion)
    return [g for g in groups if g["params"]]


@dataclass
class CohortState:
    network: MFEFNetwork
    optimizer: torch.optim.Optimizer
    cfg: CohortConfig
    specs: list[ArchSpec]
    seed: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(cfg: CohortConfig, specs: Sequence[ArchSpec | str], seed: int = 0, num_classes: int | None = None,
               dtype: torch.dtype = torch.float32) -> CohortState:
    specs = [arch_spec(s, num_classes=num_classes or 10) if isinstance(s, str) else s for s in specs]
    net = MFEFNetwork(specs, cfg)
    reset_parameters(net, make_rng([seed, 0]))
    net.to(dtype)
    opt = torch.optim.SGD(_param_groups(net, cfg), lr=cfg.lr_initial, momentum=cfg.momentum,
                          nesterov=cfg.nesterov and cfg.momentum > 0)
    return CohortState(net, opt, cfg, list(specs), seed=seed)


def _step(state: CohortState, images: torch.Tensor, labels: torch.Tensor, epoch: int):
    cfg = state.cfg
    net = state.network
    net.train()
    ramp = L.ramp_weight(epoch, cfg.alpha, cfg.ramp)
    out = net(images)
    total, (ce_s, ce_f, a_d, f_d) = compute_losses(out, labels, ramp, cfg.temperature)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    parts = L.total_loss([c.detach() for c in ce_s], ce_f.detach(), a_d.detach(), f_d.detach(), ramp, cfg.temperature)
    return parts, out


def train_step(state: CohortState, images: torch.Tensor, labels: torch.Tensor, epoch: int) -> L.LossBreakdown:
    """One combined SGD update over every parameter; returns the loss breakdown."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    check_labels(labels, state.network.num_classes)
    parts, _ = _step(state, images, labels, epoch)
    return parts


def set_lr(state: CohortState, lr: float) -> None:
    for g in state.optimizer.param_groups:
        g["lr"] = lr


def top1_error(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Percent of rows whose argmax differs from the label."""
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float((logits.argmax(dim=1) != labels).double().mean()) * 100.0


@torch.no_grad()
def predict_logits(state: CohortState, images: np.ndarray, batch_size: int = 500):
    """Eval-mode logits ``(student_list, fusion or None)`` for already-normalized images."""
    net = state.network
    net.eval()
    dtype = next(net.parameters()).dtype
    zs, zf = [], []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start:start + batch_size], dtype=dtype)
        out = net(x)
        zs.append(out["logits"])
        if out["fusion_logits"] is not None:
            zf.append(out["fusion_logits"])
    students = [torch.cat([b[j] for b in zs]) for j in range(len(zs[0]))]
    return students, (torch.cat(zf) if zf else None)


def evaluate(state: CohortState, dataset: LabeledSet, batch_size: int = 500):
    """Top-1 error (%) per student and for the fusion classifier (None without OKD)."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    students, fusion = predict_logits(state, dataset.normalize(dataset.images), batch_size)
    y = torch.as_tensor(dataset.labels)
    errs = [top1_error(z, y) for z in students]
    return errs, (None if fusion is None else top1_error(fusion, y))


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(state: CohortState, path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "archs": [asdict(s) for s in state.specs],
        "epoch": state.epoch,
        "rng": {"algorithm": RNG_ALGORITHM, "seed": state.seed, "stream": "per-epoch"},
        "model": state.network.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "history": state.history,
    }, path)


def load_checkpoint(path) -> CohortState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint {blob.get('format')} v{blob.get('version')}")
    cfg = CohortConfig.from_dict(blob["config"])
    specs = [ArchSpec(**{**a, "widths": tuple(a["widths"]), "blocks": tuple(a["blocks"])}) for a in blob["archs"]]
    dtype = next(iter(blob["model"].values())).dtype
    state = init_state(cfg, specs, seed=blob["rng"]["seed"], dtype=dtype)
    state.network.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.epoch = blob["epoch"]
    state.history = blob["history"]
    return state


# ---------------------------------------------------------------------- loop

@dataclass
class TrainReport:
    epochs: list[dict]
    summary: dict
    state: CohortState | None = field(default=None, repr=False, compare=False)

    def best_student_test_error(self) -> float | None:
        return self.summary.get("best_student_test_error")

    def write(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.epochs:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.write(json.dumps(self.summary, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "TrainReport":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        summary = recs[-1] if recs and recs[-1].get("type") == "summary" else {}
        return cls([r for r in recs if r.get("type") == "epoch"], summary)


def _mean_parts(acc: list[tuple[int, L.LossBreakdown]]) -> dict:
    n = sum(b for b, _ in acc)
    first = acc[0][1]

    def avg(get):
        return sum(b * get(p) for b, p in acc) / n

    return {
        "l_ce_students": [avg(lambda p, j=j: p.l_ce_students[j]) for j in range(len(first.l_ce_students))],
        "l_ce_fusion": avg(lambda p: p.l_ce_fusion),
        "l_a_d": avg(lambda p: p.l_a_d),
        "l_f_d": avg(lambda p: p.l_f_d),
        "total": avg(lambda p: p.total),
        "ramp_weight": first.ramp_weight,
        "temperature": first.temperature,
    }


def run_epoch(state: CohortState, train: LabeledSet, policy: AugmentPolicy | None) -> dict:
    cfg = state.cfg
    e = state.epoch
    lr = lr_at(e, cfg)
    set_lr(state, lr)
    rng = make_rng([state.seed, 1000 + e])
    dtype = next(state.network.parameters()).dtype
    acc = []
    wrong = np.zeros(cfg.n)
    wrong_f = 0
    for idx in batches(len(train), cfg.batch_size, rng, shuffle=True):
        x = train.normalize(augment_batch(train.images[idx], policy, rng))
        xt = torch.as_tensor(x, dtype=dtype)
        yt = torch.as_tensor(train.labels[idx])
        parts, out = _step(state, xt, yt, e)
        acc.append((len(idx), parts))
        for j, z in enumerate(out["logits"]):
            wrong[j] += int((z.detach().argmax(1) != yt).sum())
        if out["fusion_logits"] is not None:
            wrong_f += int((out["fusion_logits"].detach().argmax(1) != yt).sum())
    n = len(train)
    rec = {
        "type": "epoch",
        "schema": SCHEMA_VERSION,
        "epoch": e,
        "lr": lr,
        "ramp_weight": L.ramp_weight(e, cfg.alpha, cfg.ramp),
        "loss": _mean_parts(acc),
        "train_error_students": [100.0 * w / n for w in wrong],
        "train_error_fusion": 100.0 * wrong_f / n if cfg.use_okd else None,
    }
    return rec


def _summary(state: CohortState, train: LabeledSet, test: LabeledSet | None, extra: dict | None) -> dict:
    tr_s, tr_f = evaluate(state, train)
    summary = {
        "type": "summary",
        "schema": SCHEMA_VERSION,
        "seed": state.seed,
        "epochs": state.epoch,
        "archs": [s.name for s in state.specs],
        "flags": {k: getattr(state.cfg, k) for k in ("use_msfe", "use_dual_attention", "use_okd")},
        "final_total_loss": state.history[-1]["loss"]["total"] if state.history else None,
        "train_error_students": tr_s,
        "train_error_fusion": tr_f,
        "test_error_students": None,
        "test_error_fusion": None,
        "best_student_test_error": None,
    }
    if test is not None:
        te_s, te_f = evaluate(state, test)
        summary.update(test_error_students=te_s, test_error_fusion=te_f, best_student_test_error=min(te_s))
    if extra:
        summary.update(extra)
    return summary


def train(cfg: CohortConfig, specs: Sequence[ArchSpec | str], train_set: LabeledSet,
          test_set: LabeledSet | None = None, seed: int = 0, policy: AugmentPolicy | None = None,
          out_dir=None, resume: bool = False, stop_after: int | None = None, checkpoint_every: int = 1,
          eval_every: int = 0, extra_summary: dict | None = None, state: CohortState | None = None) -> TrainReport:
    """Run (or resume) a full training run.

    ``stop_after`` halts once that many epochs are done, leaving a checkpoint
    the run can be resumed from. ``eval_every > 0`` adds test error to every
    k-th epoch record.
    """
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.pt" if out is not None else None
    report_path = out / "report.jsonl" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if state is None:
        if resume and ckpt is not None and ckpt.exists():
            state = load_checkpoint(ckpt)
            if state.cfg.to_dict() != cfg.to_dict():
                raise ConfigError("checkpoint config differs from the requested config")
            log.info("resumed from %s at epoch %d", ckpt, state.epoch)
        else:
            state = init_state(cfg, specs, seed=seed, num_classes=train_set.num_classes)
    if report_path is not None:
        with open(report_path, "w") as f:
            for rec in state.history:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while state.epoch < end:
        rec = run_epoch(state, train_set, policy)
        if eval_every and test_set is not None and (state.epoch + 1) % eval_every == 0:
            te_s, te_f = evaluate(state, test_set)
            rec.update(test_error_students=te_s, test_error_fusion=te_f)
        state.history.append(rec)
        state.epoch += 1
        log.info("epoch %d lr %.4g loss %.4f err %s", rec["epoch"], rec["lr"], rec["loss"]["total"],
                 [round(e, 2) for e in rec["train_error_students"]])
        if ckpt is not None and (state.epoch % checkpoint_every == 0 or state.epoch == end):
            save_checkpoint(state, ckpt)
        if report_path is not None:
            with open(report_path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    if state.epoch < cfg.epochs:
        return TrainReport(list(state.history), {}, state)
    summary = _summary(state, train_set, test_set, extra_summary)
    if out is not None:
        with open(report_path, "a") as f:
            f.write(json.dumps(summary, sort_keys=True) + "\n")
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    return TrainReport(list(state.history), summary, state)


def run_ablation(case: str, cfg: CohortConfig, specs, train_set, test_set=None, seed: int = 0, **kw) -> TrainReport:
    extra = {"case": case, "component": CASE_LABELS[case]}
    return train(cfg.with_case(case), specs, train_set, test_set, seed=seed, extra_summary=extra, **kw)
