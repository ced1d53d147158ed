"""Datasets: CIFAR-10 binary batches and a synthetic template task."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "CMLSNN_DATA_DIR"

CIFAR_RECORD = 3073
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray  # (N, C, H, W)
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def astype(self, dtype):
        self.x_train = self.x_train.astype(dtype, copy=False)
        self.x_test = self.x_test.astype(dtype, copy=False)
        return self

    @property
    def image_shape(self):
        return self.x_train.shape[1:]


def default_data_dir():
    return os.environ.get(DATA_DIR_ENV)


def resolve_cifar_dir(path) -> Path:
    if path is None:
        path = default_data_dir()
    if path is None:
        raise FileNotFoundError(f"no CIFAR-10 directory given and ${DATA_DIR_ENV} is unset")
    path = Path(path)
    nested = path / "cifar-10-batches-bin"
    if not (path / CIFAR_TEST_FILE).exists() and nested.is_dir():
        return nested
    return path


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """One binary batch file: ``(uint8 images (N,3,32,32), int64 labels)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CIFAR-10 batch file missing: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: {raw.size} bytes is not a whole number of {CIFAR_RECORD}-byte records (truncated?)")
    n = raw.size // CIFAR_RECORD
    if n != CIFAR_RECORDS_PER_FILE:
        raise DatasetFormatError(f"{path}: expected {CIFAR_RECORDS_PER_FILE} records, found {n}")
    records = raw.reshape(n, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetFormatError(f"{path}: label byte {labels.max()} outside [0, 9]")
    return records[:, 1:].reshape(n, 3, 32, 32), labels


def _balanced_subset(labels, per_class, n_classes):
    if per_class is None:
        return np.arange(len(labels))
    picks = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)[:per_class]
        if len(idx) < per_class:
            raise DatasetFormatError(f"class {c} has only {len(idx)} records, {per_class} requested")
        picks.append(idx)
    return np.sort(np.concatenate(picks))


def cifar10_counts(data_dir=None) -> dict:
    """Validate every batch file and return ``{"train": n, "test": n}`` record counts."""
    root = resolve_cifar_dir(data_dir)
    train = sum(len(read_cifar_batch(root / name)[1]) for name in CIFAR_TRAIN_FILES)
    return {"train": train, "test": len(read_cifar_batch(root / CIFAR_TEST_FILE)[1])}


def load_cifar10(data_dir=None, per_class=None, test_per_class=None) -> Dataset:
    """Load CIFAR-10 from its binary distribution.

    ``per_class``/``test_per_class`` keep the first N images of each class.
    Pixels are scaled to [0, 1] and normalised with the per-channel mean and
    std of the (subset) training images.
    """
    root = resolve_cifar_dir(data_dir)
    parts = [read_cifar_batch(root / name) for name in CIFAR_TRAIN_FILES]
    x_tr = np.concatenate([p[0] for p in parts])
    y_tr = np.concatenate([p[1] for p in parts])
    x_te, y_te = read_cifar_batch(root / CIFAR_TEST_FILE)
    tr = _balanced_subset(y_tr, per_class, 10)
    te = _balanced_subset(y_te, test_per_class, 10)
    x_tr = x_tr[tr].astype(np.float64) / 255.0
    x_te = x_te[te].astype(np.float64) / 255.0
    mean = x_tr.mean(axis=(0, 2, 3), keepdims=True)
    std = x_tr.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    return Dataset(
        name="cifar10",
        x_train=(x_tr - mean) / std, y_train=y_tr[tr],
        x_test=(x_te - mean) / std, y_test=y_te[te],
        n_classes=10,
        meta={"dir": str(root), "per_class": per_class, "test_per_class": test_per_class,
              "n_train": int(len(tr)), "n_test": int(len(te))},
    )


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 4
    image_size: int = 16
    samples_per_class: int = 32
    test_per_class: int = 16
    noise: float = 0.0
    channels: int = 1
    seed: int = 0
    block: int = 4


def synthetic_templates(spec: SynthSpec) -> np.ndarray:
    """Blocky unit-variance class templates, ``(K, C, S, S)``."""
    rng = np.random.default_rng([spec.seed, 0x7E3])
    coarse = max(1, spec.image_size // spec.block)
    t = rng.standard_normal((spec.n_classes, spec.channels, coarse, coarse))
    t = np.kron(t, np.ones((1, 1, spec.block, spec.block)))[..., :spec.image_size, :spec.image_size]
    t -= t.mean(axis=(1, 2, 3), keepdims=True)
    t /= t.std(axis=(1, 2, 3), keepdims=True) + 1e-12
    return t


def gen_synthetic(spec: SynthSpec) -> Dataset:
    templates = synthetic_templates(spec)
    rng = np.random.default_rng([spec.seed, 0x5A1])

    def draw(per_class):
        y = np.repeat(np.arange(spec.n_classes), per_class)
        x = templates[y] + spec.noise * rng.standard_normal((len(y),) + templates.shape[1:])
        return x, y

    x_tr, y_tr = draw(spec.samples_per_class)
    x_te, y_te = draw(spec.test_per_class)
    return Dataset(name="synth", x_train=x_tr, y_train=y_tr, x_test=x_te, y_test=y_te,
                   n_classes=spec.n_classes, meta={"synth": spec.__dict__.copy()})


def nearest_template_accuracy(x, y, templates) -> float:
    """Accuracy of assigning each image to its closest template (L2)."""
    flat = x.reshape(len(x), -1)
    tf = templates.reshape(len(templates), -1)
    d = ((flat[:, None, :] - tf[None, :, :]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == y))
