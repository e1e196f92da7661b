"""Dataset ingestion, normalization and blacklist curation.

Images are stored as float32 arrays in [0, 1], shaped (N, C, H, W); metrics
therefore always operate on a fixed data range of 1.0.  Per-channel mean/std
normalization is a model-side concern, exposed here only as a helper pair.

Two dataset families are available without any files on disk:

* ``digits``  — the bundled scikit-learn handwritten digits (desk-scale
  private task, real data, 10 classes).
* ``shapes``  — a procedurally generated 10-class geometric glyph set used
  as the external spoofing dataset (semantically disjoint from digits).

``mnist`` / ``fashion_mnist`` (IDX files) and ``cifar10`` (binary batches)
load from ``$SPOOFL_DATA_ROOT`` when the files are present.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .seeding import fold_seed

DATA_ROOT_ENV = "SPOOFL_DATA_ROOT"

_SHAPES_BASE_SEED = 0x5A11


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / ".spoofl" / "data"))


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    class_names: list[str]
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.images.ndim != 4:
            raise ValueError("images must be (N, C, H, W)")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree on sample count")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names), self.num_classes)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass(frozen=True)
class Blacklist:
    """Spoof-dataset classes excluded because they overlap the private task."""

    excluded_class_ids: frozenset
    provenance: dict  # private class name -> tuple of overlapping spoof class names

    def validate(self, spoof_num_classes: int, spoof_names: list[str]) -> None:
        for cid in self.excluded_class_ids:
            if not (0 <= cid < spoof_num_classes):
                raise ValueError(f"blacklisted id {cid} not a valid spoof class id")
        from_prov = {spoof_names.index(n) for names in self.provenance.values() for n in names}
        if from_prov != set(self.excluded_class_ids):
            raise ValueError("excluded ids and provenance disagree")


def curate_blacklist(private: LabeledDataset, spoof: LabeledDataset, overlap_map) -> Blacklist:
    """Build the exclusion list from explicitly declared class-name overlaps.

    ``overlap_map`` is a list of (private class name, spoof class name)
    pairs; an empty map yields an empty blacklist.
    """
    provenance: dict[str, list[str]] = {}
    excluded: set[int] = set()
    for private_name, spoof_name in overlap_map:
        if private_name not in private.class_names:
            raise ValueError(f"unknown private class name {private_name!r}")
        if spoof_name not in spoof.class_names:
            raise ValueError(f"unknown spoof class name {spoof_name!r}")
        excluded.add(spoof.class_names.index(spoof_name))
        provenance.setdefault(private_name, [])
        if spoof_name not in provenance[private_name]:
            provenance[private_name].append(spoof_name)
    bl = Blacklist(frozenset(excluded), {k: tuple(v) for k, v in provenance.items()})
    bl.validate(spoof.num_classes, spoof.class_names)
    return bl


# ---------------------------------------------------------------------------
# normalization helpers (round-trip exact to float32 precision)

def channel_stats(dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = dataset.images.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize_images(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return (images - m) / s


def denormalize_images(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return images * s + m


def resize_images(images: np.ndarray, resolution: int) -> np.ndarray:
    """Deterministic bilinear resize of an (N, C, H, W) batch."""
    if images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    out = torch.nn.functional.interpolate(
        t, size=(resolution, resolution), mode="bilinear", align_corners=False
    )
    return np.clip(out.numpy(), 0.0, 1.0)


# ---------------------------------------------------------------------------
# bundled desk-scale datasets

def _load_digits(split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = (bunch.images.astype(np.float32) / 16.0)[:, None, :, :]
    labels = bunch.target.astype(np.int64)
    cut = 1497  # fixed holdout, source order preserved
    if split == "train":
        images, labels = images[:cut], labels[:cut]
    else:
        images, labels = images[cut:], labels[cut:]
    return images, labels, [str(d) for d in range(10)]


SHAPE_CLASSES = [
    "disk", "ring", "square", "frame", "triangle",
    "cross", "diagonal", "hbars", "vbars", "checker",
]

_SHAPES_SPLIT_SIZES = {"train": 4000, "test": 1000}


def _render_shape(cls: int, res: int, rg: np.random.Generator) -> np.ndarray:
    """Render one jittered glyph of class ``cls`` on a res x res canvas."""
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    cx = res / 2 + rg.uniform(-0.12, 0.12) * res
    cy = res / 2 + rg.uniform(-0.12, 0.12) * res
    r = rg.uniform(0.26, 0.38) * res
    stroke = rg.uniform(0.08, 0.16) * res
    fg = rg.uniform(0.65, 1.0)
    bg = rg.uniform(0.0, 0.08)
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    if cls == 0:  # disk
        mask = dist <= r
    elif cls == 1:  # ring
        mask = np.abs(dist - r) <= stroke / 2
    elif cls == 2:  # square
        mask = (np.abs(xx - cx) <= r * 0.85) & (np.abs(yy - cy) <= r * 0.85)
    elif cls == 3:  # frame
        d = np.maximum(np.abs(xx - cx), np.abs(yy - cy))
        mask = np.abs(d - r * 0.85) <= stroke / 2
    elif cls == 4:  # triangle (filled, apex up)
        h = r * 1.6
        top = cy - h / 2
        frac = np.clip((yy - top) / h, 0.0, 1.0)
        mask = (yy >= top) & (yy <= top + h) & (np.abs(xx - cx) <= frac * r)
    elif cls == 5:  # cross
        mask = (np.abs(xx - cx) <= stroke / 2) & (np.abs(yy - cy) <= r)
        mask |= (np.abs(yy - cy) <= stroke / 2) & (np.abs(xx - cx) <= r)
    elif cls == 6:  # diagonal X
        u, v = xx - cx, yy - cy
        mask = (np.abs(u - v) <= stroke * 0.8) & (dist <= r * 1.2)
        mask |= (np.abs(u + v) <= stroke * 0.8) & (dist <= r * 1.2)
    elif cls == 7:  # horizontal bars
        period = max(3.0, res / rg.uniform(3.0, 5.0))
        phase = rg.uniform(0, period)
        mask = ((yy + phase) % period) < period / 2
    elif cls == 8:  # vertical bars
        period = max(3.0, res / rg.uniform(3.0, 5.0))
        phase = rg.uniform(0, period)
        mask = ((xx + phase) % period) < period / 2
    else:  # checkerboard
        period = max(3.0, res / rg.uniform(2.0, 4.0))
        phase_x, phase_y = rg.uniform(0, period, size=2)
        mask = (((xx + phase_x) // (period / 2)) + ((yy + phase_y) // (period / 2))) % 2 < 1
    img = np.where(mask, fg, bg)
    img += rg.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _load_shapes(split: str, resolution: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
    count = _SHAPES_SPLIT_SIZES[split]
    images = np.empty((count, 1, resolution, resolution), np.float32)
    labels = np.empty(count, np.int64)
    for i in range(count):
        cls = i % len(SHAPE_CLASSES)
        rg = np.random.default_rng(fold_seed(_SHAPES_BASE_SEED, split, resolution, i))
        images[i, 0] = _render_shape(cls, resolution, rg)
        labels[i] = cls
    return images, labels, list(SHAPE_CLASSES)


# ---------------------------------------------------------------------------
# on-disk formats: IDX (MNIST family) and CIFAR-10 binary batches

def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"missing dataset file {path}(.gz)")


def _read_idx_images(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 2051:
            raise ValueError(f"bad IDX image magic {magic} in {path}")
        data = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
    return data.reshape(n, 1, rows, cols).astype(np.float32) / 255.0


def _read_idx_labels(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != 2049:
            raise ValueError(f"bad IDX label magic {magic} in {path}")
        data = np.frombuffer(f.read(n), dtype=np.uint8)
    return data.astype(np.int64)


_MNIST_FILES = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}

FASHION_CLASSES = ["t-shirt", "trouser", "pullover", "dress", "coat",
                   "sandal", "shirt", "sneaker", "bag", "ankle boot"]

CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]


def _load_idx_family(name: str, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    root = data_root() / name
    img_file, lbl_file = _MNIST_FILES[split]
    images = _read_idx_images(root / img_file)
    labels = _read_idx_labels(root / lbl_file)
    names = FASHION_CLASSES if name == "fashion_mnist" else [str(d) for d in range(10)]
    return images, labels, names


def _load_cifar10(split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    root = data_root() / "cifar10"
    files = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    images, labels = [], []
    for fname in files:
        path = root / fname
        if not path.exists():
            raise FileNotFoundError(f"missing dataset file {path}")
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8).reshape(-1, 3073)
        labels.append(raw[:, 0].astype(np.int64))
        images.append(raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return np.concatenate(images), np.concatenate(labels), list(CIFAR10_CLASSES)


# ---------------------------------------------------------------------------
# registry

_NATIVE_RESOLUTION = {"digits": 8, "shapes": 16, "mnist": 28, "fashion_mnist": 28, "cifar10": 32}

DATASET_NAMES = tuple(_NATIVE_RESOLUTION)


def load_dataset(name: str, split: str = "train", resolution: int | None = None,
                 limit: int | None = None) -> LabeledDataset:
    """Load a registered dataset, resized to ``resolution`` and scaled to [0, 1].

    Ordering is deterministic given (name, split, resolution); ``limit``
    truncates to the first ``limit`` samples.
    """
    if name not in _NATIVE_RESOLUTION:
        raise ValueError(f"unknown dataset {name!r}; known: {sorted(_NATIVE_RESOLUTION)}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if resolution is None:
        resolution = _NATIVE_RESOLUTION[name]
    if resolution < 1:
        raise ValueError("resolution must be a positive integer")

    if name == "digits":
        images, labels, names = _load_digits(split)
        images = resize_images(images, resolution)
    elif name == "shapes":
        images, labels, names = _load_shapes(split, resolution)
    elif name in ("mnist", "fashion_mnist"):
        images, labels, names = _load_idx_family(name, split)
        images = resize_images(images, resolution)
    else:
        images, labels, names = _load_cifar10(split)
        images = resize_images(images, resolution)

    if limit is not None:
        if limit > len(images):
            raise ValueError(f"limit {limit} exceeds available {len(images)} samples")
        images, labels = images[:limit], labels[:limit]
    return LabeledDataset(images, labels, names, len(names))


def save_dataset(dataset: LabeledDataset, path) -> None:
    np.savez_compressed(path, images=dataset.images, labels=dataset.labels,
                        class_names=np.array(dataset.class_names, dtype=object))


def load_dataset_file(path) -> LabeledDataset:
    with np.load(path, allow_pickle=True) as z:
        names = [str(n) for n in z["class_names"]]
        return LabeledDataset(z["images"], z["labels"], names, len(names))
