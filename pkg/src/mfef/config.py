"""Experiment configuration documents (YAML key-value, unknown keys rejected)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .core_types import ConfigError
from .data import AugmentPolicy, DatasetSpec
from .models import arch_spec
from .trainer import CohortConfig

_TOP_KEYS = {"name", "archs", "seeds", "out_dir", "checkpoint_every", "eval_every", "baseline",
             "dataset", "augment", "cohort"}


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class ExperimentConfig:
    cohort: CohortConfig
    dataset: DatasetSpec
    archs: list[str]
    seeds: list[int] = field(default_factory=lambda: [0])
    augment: AugmentPolicy | None = None
    out_dir: str = "runs"
    name: str = "mfef"
    checkpoint_every: int = 1
    eval_every: int = 0
    baseline: bool = False

    def __post_init__(self):
        if len(self.archs) != self.cohort.n:
            raise ConfigError(f"cohort.n={self.cohort.n} but {len(self.archs)} archs listed")
        for a in self.archs:
            arch_spec(a)
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.checkpoint_every < 1 or self.eval_every < 0:
            raise ConfigError("checkpoint_every must be >= 1 and eval_every >= 0")
        if self.augment is not None and self.augment.crop > self.dataset.image_size + 2 * self.augment.pad:
            raise ConfigError("augment.crop exceeds the padded image size")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "archs": list(self.archs),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
            "eval_every": self.eval_every,
            "baseline": self.baseline,
            "dataset": asdict(self.dataset),
            "augment": None if self.augment is None else asdict(self.augment),
            "cohort": self.cohort.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config document must be a mapping")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        for key in ("archs", "dataset", "cohort"):
            if key not in d:
                raise ConfigError(f"missing required key {key!r}")
        d = dict(d)
        cohort = _strict(CohortConfig, d.pop("cohort"), "cohort")
        dataset = _strict(DatasetSpec, d.pop("dataset"), "dataset")
        aug = d.pop("augment", None)
        augment = None if aug is None else _strict(AugmentPolicy, aug, "augment")
        try:
            return cls(cohort=cohort, dataset=dataset, augment=augment, **d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML: {e}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


def bundled_config(name: str) -> str:
    """Text of a config shipped with the package (e.g. ``synthetic_smoke``)."""
    return resources.files("mfef.configs").joinpath(f"{name}.yaml").read_text()


def bundled_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("mfef.configs").iterdir() if p.name.endswith(".yaml"))
