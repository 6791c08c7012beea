"""Dataset ingestion (CIFAR binary, synthetic blobs), augmentation and batching."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_types import ConfigError, make_rng

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
PIXELS = 3 * 32 * 32

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
CIFAR100_TRAIN_FILES = ["train.bin"]
CIFAR100_TEST_FILES = ["test.bin"]

DATA_ROOT_ENV = "MFEF_DATA_ROOT"


class CifarFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass
class AugmentPolicy:
    pad: int = 4
    crop: int = 32
    horizontal_flip_prob: float = 0.5

    def __post_init__(self):
        if self.pad < 0 or self.crop < 1:
            raise ConfigError("pad must be >= 0 and crop >= 1")
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ConfigError("horizontal_flip_prob must lie in [0, 1]")


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    root: str | None = None
    train_size: int | None = None
    test_size: int | None = None
    num_classes: int = 4
    image_size: int = 16
    per_class_train: int = 125
    per_class_test: int = 125
    template_seed: int = 0

    def __post_init__(self):
        if self.source not in ("cifar10-binary", "cifar100-binary", "synthetic"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        expected = {"cifar10-binary": 10, "cifar100-binary": 100}.get(self.source)
        if expected is not None and self.num_classes != expected:
            raise ConfigError(f"{self.source} has {expected} classes, config says {self.num_classes}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    def resolved_root(self) -> Path:
        root = self.root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(f"dataset root not set (config key 'root' or ${DATA_ROOT_ENV})")
        return Path(root)


@dataclass
class LabeledSet:
    """Raw images ``(N, C, H, W)`` float32 plus int64 labels.

    ``mean``/``std`` are per-channel normalization statistics; they are
    computed from the training split and copied onto the test split.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return images.astype(np.float32)
        return ((images - self.mean[None, :, None, None]) / self.std[None, :, None, None]).astype(np.float32)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std[std == 0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def attach_stats(train: LabeledSet, test: LabeledSet | None = None) -> None:
    train.mean, train.std = channel_stats(train.images)
    if test is not None:
        test.mean, test.std = train.mean, train.std


# ---------------------------------------------------------------- CIFAR binary

def parse_cifar_records(buf: bytes, kind: str = "cifar10", base_offset: int = 0):
    """Parse concatenated CIFAR records.

    Returns ``(images uint8 (N,3,32,32), labels int64, coarse_labels or None)``.
    For CIFAR-100 ``labels`` holds the fine labels.
    """
    if kind == "cifar10":
        rec, n_labels, label_max = CIFAR10_RECORD, 1, (10,)
    elif kind == "cifar100":
        rec, n_labels, label_max = CIFAR100_RECORD, 2, (20, 100)
    else:
        raise ValueError(f"unknown CIFAR kind {kind!r}")
    if len(buf) % rec:
        n_full = len(buf) // rec
        raise CifarFormatError(
            f"truncated record: {len(buf)} bytes is not a multiple of {rec}", base_offset + n_full * rec
        )
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    for col, hi in enumerate(label_max):
        bad = np.nonzero(arr[:, col] >= hi)[0]
        if bad.size:
            i = int(bad[0])
            raise CifarFormatError(
                f"label {int(arr[i, col])} out of range [0, {hi}) in record {i}", base_offset + i * rec + col
            )
    images = arr[:, n_labels:].reshape(-1, 3, 32, 32).copy()
    labels = arr[:, n_labels - 1].astype(np.int64)
    coarse = arr[:, 0].astype(np.int64) if kind == "cifar100" else None
    return images, labels, coarse


def serialize_cifar_records(images: np.ndarray, labels: np.ndarray, coarse: np.ndarray | None = None) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, dtype=np.uint8)[:, None])
    return np.concatenate(cols + [images], axis=1).tobytes()


def read_cifar_file(path: Path, kind: str = "cifar10"):
    try:
        return parse_cifar_records(Path(path).read_bytes(), kind)
    except CifarFormatError as e:
        raise CifarFormatError(f"{path}: {e.args[0].rsplit(' at byte offset', 1)[0]}", e.offset) from None


def _load_split(root: Path, files: list[str], kind: str, limit: int | None):
    imgs, labels = [], []
    total = 0
    for name in files:
        if limit is not None and total >= limit:
            break
        path = root / name
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR file {path}")
        x, y, _ = read_cifar_file(path, kind)
        imgs.append(x)
        labels.append(y)
        total += len(y)
    x = np.concatenate(imgs)[:limit]
    y = np.concatenate(labels)[:limit]
    return x.astype(np.float32) / 255.0, y


def load_cifar(spec: DatasetSpec) -> tuple[LabeledSet, LabeledSet]:
    """Read the public binary release; the first ``train_size``/``test_size`` records are kept."""
    root = spec.resolved_root()
    if spec.source == "cifar10-binary":
        kind, train_files, test_files = "cifar10", CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES
        if (root / "cifar-10-batches-bin").is_dir():
            root = root / "cifar-10-batches-bin"
    elif spec.source == "cifar100-binary":
        kind, train_files, test_files = "cifar100", CIFAR100_TRAIN_FILES, CIFAR100_TEST_FILES
        if (root / "cifar-100-binary").is_dir():
            root = root / "cifar-100-binary"
    else:
        raise ConfigError(f"load_cifar cannot read source {spec.source!r}")
    xtr, ytr = _load_split(root, train_files, kind, spec.train_size)
    xte, yte = _load_split(root, test_files, kind, spec.test_size)
    train = LabeledSet(xtr, ytr, spec.num_classes, meta={"source": spec.source, "split": "train"})
    test = LabeledSet(xte, yte, spec.num_classes, meta={"source": spec.source, "split": "test"})
    attach_stats(train, test)
    return train, test


# ------------------------------------------------------------------ synthetic

def make_templates(num_classes: int, image_size: int, seed: int = 0, channels: int = 3,
                   min_distance: float | None = None) -> np.ndarray:
    """Smooth per-class templates: coarse 4x4 noise upsampled bilinearly, unit RMS.

    Redraws until every pair is at least ``min_distance`` apart in L2
    (default ``sqrt(pixels)``, i.e. RMS difference 1).
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    rng = make_rng([seed, 7919])
    n_pix = channels * image_size * image_size
    floor = np.sqrt(n_pix) if min_distance is None else min_distance
    coords = np.linspace(0, 3, image_size)
    i0 = np.clip(np.floor(coords).astype(int), 0, 2)
    frac = coords - i0
    for _ in range(1000):
        coarse = rng.normal(size=(num_classes, channels, 4, 4))
        rows = coarse[:, :, i0, :] * (1 - frac)[None, None, :, None] + coarse[:, :, i0 + 1, :] * frac[None, None, :, None]
        full = rows[..., i0] * (1 - frac) + rows[..., i0 + 1] * frac
        full /= np.sqrt((full ** 2).mean(axis=(1, 2, 3), keepdims=True))
        flat = full.reshape(num_classes, -1)
        d = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
        if d[~np.eye(num_classes, dtype=bool)].min() >= floor:
            return full.astype(np.float32)
    raise RuntimeError("could not draw separated templates")


def synth_blobs(num_classes: int, per_class: int, image_size: int, rng: np.random.Generator,
                noise: float = 0.3, template_seed: int = 0, channels: int = 3) -> LabeledSet:
    """Gaussian noise (sigma ``noise``) around per-class templates, class-balanced."""
    templates = make_templates(num_classes, image_size, template_seed, channels)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = templates[labels] + rng.normal(0.0, noise, size=(len(labels), channels, image_size, image_size))
    return LabeledSet(images.astype(np.float32), labels.astype(np.int64), num_classes,
                      meta={"source": "synthetic", "template_seed": template_seed, "noise": noise})


def nearest_template_predict(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    flat = images.reshape(len(images), -1)
    t = templates.reshape(len(templates), -1)
    d = (flat ** 2).sum(1)[:, None] - 2 * flat @ t.T + (t ** 2).sum(1)[None, :]
    return d.argmin(axis=1)


def load_synthetic(spec: DatasetSpec, seed: int = 0) -> tuple[LabeledSet, LabeledSet]:
    train = synth_blobs(spec.num_classes, spec.per_class_train, spec.image_size, make_rng([seed, 1]),
                        template_seed=spec.template_seed)
    test = synth_blobs(spec.num_classes, spec.per_class_test, spec.image_size, make_rng([seed, 2]),
                       template_seed=spec.template_seed)
    attach_stats(train, test)
    return train, test


def load_dataset(spec: DatasetSpec, seed: int = 0) -> tuple[LabeledSet, LabeledSet]:
    if spec.source == "synthetic":
        return load_synthetic(spec, seed)
    return load_cifar(spec)


_MAGIC = b"MFEFSET1"


def save_labeled_set(ds: LabeledSet, path) -> None:
    """Length-prefixed container: magic, JSON header, then raw image and label bytes."""
    header = {
        "num_classes": ds.num_classes,
        "image_shape": list(ds.images.shape),
        "meta": ds.meta,
        "mean": None if ds.mean is None else ds.mean.tolist(),
        "std": None if ds.std is None else ds.std.tolist(),
    }
    blobs = [json.dumps(header, sort_keys=True).encode(), np.ascontiguousarray(ds.images, np.float32).tobytes(),
             np.ascontiguousarray(ds.labels, np.int64).tobytes()]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        for b in blobs:
            f.write(struct.pack("<Q", len(b)))
            f.write(b)


def read_labeled_set(path) -> LabeledSet:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a labeled-set container")
        blobs = []
        for _ in range(3):
            (n,) = struct.unpack("<Q", f.read(8))
            b = f.read(n)
            if len(b) != n:
                raise ValueError(f"{path}: truncated container")
            blobs.append(b)
    header = json.loads(blobs[0])
    images = np.frombuffer(blobs[1], np.float32).reshape(header["image_shape"]).copy()
    labels = np.frombuffer(blobs[2], np.int64).copy()
    ds = LabeledSet(images, labels, header["num_classes"], meta=header["meta"])
    if header["mean"] is not None:
        ds.mean = np.asarray(header["mean"], np.float32)
        ds.std = np.asarray(header["std"], np.float32)
    return ds


# --------------------------------------------------------- augment + batches

def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random crop, random horizontal flip of one ``(C, H, W)`` image."""
    _, h, w = image.shape
    if h != w:
        raise ValueError(f"augment expects square images, got {h}x{w}")
    p = policy.pad
    padded = np.pad(image, ((0, 0), (p, p), (p, p))) if p else image
    room = h + 2 * p - policy.crop
    if room < 0:
        raise ConfigError(f"crop {policy.crop} larger than padded size {h + 2 * p}")
    dy, dx = rng.integers(0, room + 1, size=2)
    out = padded[:, dy:dy + policy.crop, dx:dx + policy.crop]
    if rng.random() < policy.horizontal_flip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, policy: AugmentPolicy | None, rng: np.random.Generator) -> np.ndarray:
    if policy is None:
        return images
    return np.stack([augment(im, policy, rng) for im in images])


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None, shuffle: bool = True):
    """Yield index arrays covering ``range(n)`` once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
