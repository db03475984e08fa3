"""Federated datasets: synthetic generators, IDX loading, partitioning, CSV I/O."""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ctxfed.errors import (
    IdxCountMismatchError,
    IdxMagicError,
    IdxParseError,
    IdxTruncatedError,
    InvalidInputError,
)
from ctxfed.model import LabeledDataset

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    devices: tuple[LabeledDataset, ...]
    test: LabeledDataset | None
    num_classes: int

    def __post_init__(self):
        devices = tuple(self.devices)
        if not devices:
            raise InvalidInputError("need at least one device")
        if self.num_classes < 2:
            raise InvalidInputError("need at least two classes")
        d = devices[0].num_features
        for k, dev in enumerate(devices):
            if len(dev) == 0:
                raise InvalidInputError(f"device {k} has no samples")
            if dev.num_features != d:
                raise InvalidInputError(
                    f"device {k} has {dev.num_features} features, expected {d}"
                )
            if dev.labels.max() >= self.num_classes:
                raise InvalidInputError(f"device {k} has a label >= {self.num_classes}")
        if self.test is not None:
            if self.test.num_features != d:
                raise InvalidInputError("test set feature dimension differs from devices")
            if len(self.test) and self.test.labels.max() >= self.num_classes:
                raise InvalidInputError(f"test set has a label >= {self.num_classes}")
        object.__setattr__(self, "devices", devices)

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    @property
    def num_features(self) -> int:
        return self.devices[0].num_features

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([len(dev) for dev in self.devices], dtype=np.int64)

    @cached_property
    def device_weights(self) -> np.ndarray:
        """``p_k = |D_k| / |D|``."""
        return self.sizes / self.sizes.sum()

    @cached_property
    def pooled(self) -> LabeledDataset:
        return LabeledDataset.concat(list(self.devices))


# -- synthetic ---------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic non-iid softmax generator.

    ``alpha`` spreads the per-device ground-truth models, ``beta`` the
    per-device feature means. Sample counts are log-normal
    (``samples_mean``/``samples_sigma`` of the underlying normal) rounded and
    clipped to ``[samples_min, samples_max]``; a ``test_fraction`` of every
    device's samples is pooled into the shared test set.
    """

    alpha: float = 0.0
    beta: float = 0.0
    iid: bool = False
    num_devices: int = 100
    num_features: int = 60
    num_classes: int = 10
    samples_mean: float = 4.0
    samples_sigma: float = 2.0
    samples_min: int = 50
    samples_max: int = 1000
    test_fraction: float = 0.2
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.num_devices < 1:
            out.append("num_devices must be >= 1")
        if self.num_features < 1:
            out.append("num_features must be >= 1")
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        if not (self.alpha >= 0 and self.beta >= 0):
            out.append("alpha and beta must be >= 0")
        if self.samples_sigma < 0:
            out.append("samples_sigma must be >= 0")
        if not 0 <= self.test_fraction < 1:
            out.append("test_fraction must be in [0, 1)")
        min_needed = 2 if self.test_fraction > 0 else 1
        if self.samples_min < min_needed:
            out.append(f"samples_min must be >= {min_needed}")
        if self.samples_max < self.samples_min:
            out.append("samples_max must be >= samples_min")
        return out


def generate_synthetic(spec: SyntheticSpec) -> FederatedDataset:
    problems = spec.problems()
    if problems:
        raise InvalidInputError("; ".join(problems))
    rng = np.random.default_rng(spec.seed)
    n_dev, d, c = spec.num_devices, spec.num_features, spec.num_classes
    sizes = np.clip(
        np.rint(rng.lognormal(spec.samples_mean, spec.samples_sigma, n_dev)),
        spec.samples_min,
        spec.samples_max,
    ).astype(np.int64)
    feature_scale = np.sqrt(np.arange(1, d + 1, dtype=np.float64) ** -1.2)

    if spec.iid:
        shared_w = rng.normal(0.0, 1.0, (c, d))
        shared_b = rng.normal(0.0, 1.0, c)
    else:
        model_means = rng.normal(0.0, spec.alpha, n_dev)
        feature_shift = rng.normal(0.0, spec.beta, n_dev)

    train, test = [], []
    for k in range(n_dev):
        if spec.iid:
            w, b, v = shared_w, shared_b, np.zeros(d)
        else:
            v = rng.normal(feature_shift[k], 1.0, d)
            w = rng.normal(model_means[k], 1.0, (c, d))
            b = rng.normal(model_means[k], 1.0, c)
        x = v + rng.normal(0.0, 1.0, (sizes[k], d)) * feature_scale
        y = np.argmax(x @ w.T + b, axis=1)
        perm = rng.permutation(sizes[k])
        n_test = int(np.floor(spec.test_fraction * sizes[k]))
        if spec.test_fraction > 0:
            n_test = max(n_test, 1)
        tr, te = perm[n_test:], perm[:n_test]
        train.append(LabeledDataset(x[tr], y[tr]))
        test.append(LabeledDataset(x[te], y[te]))
    return FederatedDataset(tuple(train), LabeledDataset.concat(test), c)


# -- IDX ---------------------------------------------------------------------


def _read_idx(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(path, "file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(
            path, f"bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(path, "truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header
    if payload < count:
        raise IdxTruncatedError(path, f"payload has {payload} bytes, header promises {count}")
    if payload > count:
        raise IdxParseError(path, f"{payload - count} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            labels_path,
            f"{labels.shape[0]} labels but {images.shape[0]} images in {images_path}",
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(x, labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (1-d → label file, 3-d → image file)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise InvalidInputError("IDX writer only handles uint8 data")
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


# -- partitioning ------------------------------------------------------------


def partition(
    data: LabeledDataset,
    num_devices: int,
    shards_per_device: int = 2,
    seed: int = 0,
    test: LabeledDataset | None = None,
    num_classes: int | None = None,
) -> FederatedDataset:
    """Label-sorted shard partition.

    Samples are stably sorted by label and cut into ``num_devices *
    shards_per_device`` contiguous shards (sizes differ by at most one); each
    device receives ``shards_per_device`` shards chosen by a seeded shuffle.
    """
    if num_devices < 1 or shards_per_device < 1:
        raise InvalidInputError("num_devices and shards_per_device must be >= 1")
    n_shards = num_devices * shards_per_device
    if len(data) < n_shards:
        raise InvalidInputError(
            f"{len(data)} samples cannot fill {n_shards} non-empty shards"
        )
    order = np.argsort(data.labels, kind="stable")
    shards = np.array_split(order, n_shards)
    assignment = np.random.default_rng(seed).permutation(n_shards)
    devices = []
    for k in range(num_devices):
        picks = assignment[k * shards_per_device : (k + 1) * shards_per_device]
        idx = np.sort(np.concatenate([shards[i] for i in picks]))
        devices.append(data.subset(idx))
    if num_classes is None:
        hi = int(data.labels.max())
        if test is not None and len(test):
            hi = max(hi, int(test.labels.max()))
        num_classes = max(hi + 1, 2)
    return FederatedDataset(tuple(devices), test, num_classes)


# -- CSV directory format ----------------------------------------------------

_DEVICE_FILE = re.compile(r"^device_(\d+)\.csv$")


def _write_table(path: Path, data: LabeledDataset) -> None:
    with open(path, "w", newline="\n") as fh:
        for label, row in zip(data.labels, data.features):
            fh.write(",".join([str(int(label))] + [f"{v:.17g}" for v in row]) + "\n")


def _read_table(path: Path, num_features: int | None = None) -> LabeledDataset:
    try:
        table = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    if table.size == 0:
        if num_features is None:
            raise InvalidInputError(f"{path}: empty table")
        return LabeledDataset(np.zeros((0, num_features)), np.zeros(0, dtype=np.int64))
    labels = table[:, 0]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise InvalidInputError(f"{path}: first column must hold non-negative integer labels")
    return LabeledDataset(table[:, 1:], labels.astype(np.int64))


def write_csv_dir(fd: FederatedDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, dev in enumerate(fd.devices):
        _write_table(directory / f"device_{k}.csv", dev)
    if fd.test is not None:
        _write_table(directory / "test.csv", fd.test)


def csv_device_count(directory) -> int:
    ids = sorted(
        int(m.group(1)) for m in map(_DEVICE_FILE.match, os.listdir(directory)) if m
    )
    if ids != list(range(len(ids))):
        raise InvalidInputError(f"{directory}: device files must be numbered 0..N-1")
    return len(ids)


def load_csv_dir(directory, num_classes: int | None = None) -> FederatedDataset:
    """Load ``device_<k>.csv`` files (label first) plus an optional ``test.csv``."""
    directory = Path(directory)
    n = csv_device_count(directory)
    if n == 0:
        raise InvalidInputError(f"{directory}: no device_<k>.csv files")
    devices = [_read_table(directory / f"device_{k}.csv") for k in range(n)]
    test_path = directory / "test.csv"
    test = _read_table(test_path, devices[0].num_features) if test_path.exists() else None
    if num_classes is None:
        labels = [int(dev.labels.max()) for dev in devices]
        if test is not None and len(test):
            labels.append(int(test.labels.max()))
        num_classes = max(max(labels) + 1, 2)
    return FederatedDataset(tuple(devices), test, num_classes)
