"""Dataset ingestion (CIFAR-10 binary, MNIST IDX), the synthetic Gaussian
task, and seeded mini-batch iteration."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


class CorruptFileError(DatasetFormatError):
    pass


class MagicMismatchError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, float32 in [0, 1]
    labels: np.ndarray  # N, int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.labels) == 0:
            raise ValueError(f"need N > 0 aligned images/labels, got {len(self.images)} and {len(self.labels)}")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.class_count, self.split)


def seeded_subset(dataset: Dataset, size: Optional[int], seed: int) -> Dataset:
    """First ``size`` items after a seeded shuffle (the whole set if None)."""
    if size is None or size >= len(dataset):
        return dataset
    order = np.random.default_rng([seed, len(dataset)]).permutation(len(dataset))
    return dataset.subset(np.sort(order[:size]))


# --------------------------------------------------------------------------
# CIFAR-10 binary: 1 label byte + 1024 R + 1024 G + 1024 B, row-major planes


def parse_cifar10_bytes(raw: bytes, split: str = "train") -> Dataset:
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise CorruptFileError(f"CIFAR-10 payload of {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise CorruptFileError(f"CIFAR-10 label byte {labels.max()} > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels, 10, split)


def read_cifar10_file(path, split: str = "train") -> Dataset:
    return parse_cifar10_bytes(Path(path).read_bytes(), split)


def serialize_cifar10(dataset: Dataset) -> bytes:
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR-10 images are 3 x 32 x 32, got {dataset.images.shape[1:]}")
    pixels = np.rint(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def write_cifar10_file(path, dataset: Dataset) -> None:
    Path(path).write_bytes(serialize_cifar10(dataset))


def load_cifar10(dir_path) -> Tuple[Dataset, Dataset]:
    root = Path(dir_path)
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (root / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{root} lacks CIFAR-10 batch files: {missing}")
    parts = [read_cifar10_file(root / f) for f in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), 10, "train")
    test = read_cifar10_file(root / CIFAR_TEST_FILE, "test")
    return train, test


# --------------------------------------------------------------------------
# MNIST IDX


def _read_idx(raw: bytes, magic: int, ndim: int, what: str) -> Tuple[Tuple[int, ...], memoryview]:
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{what}: file too short for a header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise MagicMismatchError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedPayloadError(f"{what}: file too short for a header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = int(np.prod(dims))
    payload = memoryview(raw)[header:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{what}: payload has {len(payload)} bytes, header promises {need}")
    return dims, payload[:need]


def parse_mnist_idx(image_bytes: bytes, label_bytes: bytes, split: str = "train") -> Dataset:
    (n, rows, cols), pix = _read_idx(image_bytes, IDX_IMAGES_MAGIC, 3, "images")
    (m,), lab = _read_idx(label_bytes, IDX_LABELS_MAGIC, 1, "labels")
    if n != m:
        raise CountMismatchError(f"image file holds {n} items but label file holds {m}")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, rows, cols).astype(np.float32) / np.float32(255.0)
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if n and labels.max() > 9:
        raise DatasetFormatError(f"MNIST label {labels.max()} > 9")
    return Dataset(images, labels, 10, split)


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    return parse_mnist_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), split)


def serialize_mnist_idx(dataset: Dataset) -> Tuple[bytes, bytes]:
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX images are single-channel")
    pixels = np.rint(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


# --------------------------------------------------------------------------
# synthetic "ideal" data: class-conditional Gaussians mapped into [0, 1]


@dataclass
class SyntheticSpec:
    """Class-conditional Gaussians in ``input_dim = C*H*W`` dimensions.

    A draw z ~ N(mean_c, cov) becomes the image clip(offset + scale * z, 0, 1)
    reshaped to ``image_shape``. ``means`` defaults to +/- ``separation`` on
    the first coordinate for two classes, and to ``separation`` times one-hot
    directions otherwise.
    """

    image_shape: Tuple[int, int, int] = (1, 8, 8)
    class_count: int = 2
    n_train: int = 1000
    n_test: int = 2000
    means: Optional[List[List[float]]] = None
    cov: Optional[List[List[float]]] = None
    separation: float = 3.0
    offset: float = 0.5
    scale: float = 0.1
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.image_shape))

    def resolved_means(self) -> np.ndarray:
        d = self.input_dim
        if self.means is not None:
            means = np.asarray(self.means, dtype=np.float64)
        elif self.class_count == 1:
            means = np.zeros((1, d))
        elif self.class_count == 2:
            means = np.zeros((2, d))
            means[0, 0], means[1, 0] = self.separation, -self.separation
        else:
            if self.class_count > d:
                raise ValueError("default means need class_count <= input_dim")
            means = np.eye(self.class_count, d) * self.separation
        if means.shape != (self.class_count, d):
            raise ValueError(f"means must be {self.class_count} x {d}, got {means.shape}")
        if len({m.tobytes() for m in means}) != len(means):
            raise ValueError("class means must be distinct")
        return means

    def resolved_cov(self) -> np.ndarray:
        d = self.input_dim
        cov = np.eye(d) if self.cov is None else np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (d, d) or not np.allclose(cov, cov.T):
            raise ValueError(f"covariance must be a symmetric {d} x {d} matrix")
        return cov


def make_synthetic(spec: SyntheticSpec) -> Tuple[Dataset, Dataset]:
    """Train and test splits drawn i.i.d. from one distribution."""
    means = spec.resolved_means()
    cov = spec.resolved_cov()
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    rng = np.random.default_rng([spec.seed, 0x5EED])

    def draw(n, split):
        labels = rng.integers(0, spec.class_count, size=n)
        z = means[labels] + rng.standard_normal((n, spec.input_dim)) @ chol.T
        x = np.clip(spec.offset + spec.scale * z, 0.0, 1.0).astype(np.float32)
        return Dataset(x.reshape((n,) + tuple(spec.image_shape)), labels, spec.class_count, split)

    return draw(spec.n_train, "train"), draw(spec.n_test, "test")


# --------------------------------------------------------------------------
# batching


def batch_indices(n: int, batch_size: int, shuffle_seed: Optional[int], epoch: int = 0) -> List[np.ndarray]:
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, shuffle_seed: Optional[int], epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (images, labels, indices); the last batch may be short."""
    for idx in batch_indices(len(dataset), batch_size, shuffle_seed, epoch):
        yield dataset.images[idx], dataset.labels[idx], idx
