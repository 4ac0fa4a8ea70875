"""Datasets: IDX ingestion, the four-way partition, and a synthetic image corpus."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, CountMismatchError, TruncatedPayloadError, WrongMagicError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (count, H, W, C) in [0, 1]
    labels: np.ndarray  # (count,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractError(f"images must be (count, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def take(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes)


def concat(parts) -> LabeledDataset:
    parts = list(parts)
    if not parts:
        raise ContractError("nothing to concatenate")
    num_classes = max(p.num_classes for p in parts)
    return LabeledDataset(np.concatenate([p.images for p in parts]),
                          np.concatenate([p.labels for p in parts]), num_classes)


# ---------------------------------------------------------------- IDX


def _read_idx(path, expected_magic: int):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise WrongMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    have = len(raw) - header
    if have < need:
        raise TruncatedPayloadError(f"{path}: payload holds {have} bytes, header declares {need}")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=need, offset=header)


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label file pair (big-endian headers, ubyte payload).

    Pixels are scaled by 1/255 and a trailing channel axis is added.
    """
    img_dims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (count,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != count:
        raise CountMismatchError(f"{img_dims[0]} images but {count} labels")
    images = pixels.reshape(img_dims[0], img_dims[1], img_dims[2], 1).astype(np.float64) / 255.0
    return LabeledDataset(images, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (count, H, W) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------- partition


@dataclass(frozen=True)
class PartitionPlan:
    validation_size: int
    public_size: int
    per_participant_train: int
    per_participant_test: int
    participant_count: int
    seed: int = 0

    @property
    def total(self) -> int:
        return (self.validation_size + self.public_size
                + self.participant_count * (self.per_participant_train + self.per_participant_test))


MNIST_PLAN = PartitionPlan(28000, 420, 6653, 1663, 5)
SYNTHETIC_PLAN = PartitionPlan(6000, 90, 1426, 356, 5)


@dataclass
class Partition:
    validation: np.ndarray
    public: np.ndarray
    train: list
    test: list

    def slices(self):
        yield "validation", self.validation
        yield "public", self.public
        for i, (tr, te) in enumerate(zip(self.train, self.test), start=1):
            yield f"train_{i}", tr
            yield f"test_{i}", te


def partition_indices(dataset_size: int, plan: PartitionPlan) -> Partition:
    """Seeded uniform shuffle cut into validation, public, then per-participant train/test."""
    if plan.participant_count < 1:
        raise ContractError("need at least one participant")
    sizes = (plan.validation_size, plan.public_size, plan.per_participant_train, plan.per_participant_test)
    if any(s < 0 for s in sizes):
        raise ContractError("partition sizes must be non-negative")
    if plan.total != dataset_size:
        deficit = dataset_size - plan.total
        raise ContractError(
            f"plan covers {plan.total} examples but dataset has {dataset_size} (deficit {deficit:+d})")
    order = np.random.default_rng(plan.seed).permutation(dataset_size)
    cuts = np.cumsum([plan.validation_size, plan.public_size]
                     + [plan.per_participant_train, plan.per_participant_test] * plan.participant_count)
    pieces = np.split(order, cuts[:-1])
    return Partition(pieces[0], pieces[1], pieces[2::2], pieces[3::2])


def partition(dataset: LabeledDataset, plan: PartitionPlan) -> dict:
    """Materialize the partition as datasets keyed ``validation``, ``public``, ``train``, ``test``."""
    idx = partition_indices(len(dataset), plan)
    return {
        "validation": dataset.take(idx.validation),
        "public": dataset.take(idx.public),
        "train": [dataset.take(t) for t in idx.train],
        "test": [dataset.take(t) for t in idx.test],
    }


def subset(dataset: LabeledDataset, count: int, seed: int) -> LabeledDataset:
    """Seeded sample without replacement, order preserved."""
    if not 0 < count <= len(dataset):
        raise ContractError(f"cannot take {count} of {len(dataset)} examples")
    keep = np.sort(np.random.default_rng(seed).choice(len(dataset), size=count, replace=False))
    return dataset.take(keep)


# ---------------------------------------------------------------- synthetic corpus


def _pattern(kind: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    freq = rng.uniform(0.35, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    if kind == 0:  # rings around a jittered center
        r = np.hypot(yy - cy, xx - cx)
        base = np.cos(freq * r + phase)
    elif kind == 1:  # oriented stripes
        theta = rng.uniform(-0.35, 0.35)
        base = np.cos(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    else:  # blobs on a lattice
        base = np.cos(freq * (xx - cx) + phase) * np.cos(freq * (yy - cy) + phase)
    return base


def synth_dataset(seed: int, count: int, num_classes: int = 3, height: int = 32, width: int = 32,
                  noise: float = 0.6) -> LabeledDataset:
    """Class-balanced grayscale textures with heavy pixel noise.

    Class ``k`` draws from procedural family ``k % 3`` (rings, stripes,
    blobs); families repeat for ``num_classes > 3`` with the rotation shifted
    by a quarter turn per repeat. Pixels land in [0, 1].
    """
    if num_classes < 1 or count % num_classes:
        raise ContractError(f"count {count} is not divisible by {num_classes} classes")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), count // num_classes)
    rng.shuffle(labels)
    images = np.empty((count, height, width, 1))
    for n, label in enumerate(labels):
        img = _pattern(label % 3, height, width, rng)
        img = np.rot90(img, k=label // 3) if height == width else img
        img = 0.5 + 0.25 * img + 0.25 * noise * rng.standard_normal((height, width))
        images[n, :, :, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels.astype(np.int64), num_classes)
