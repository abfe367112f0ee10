"""Dataset loading (IDX, CIFAR-10 binary), synthetic blobs, subsetting, batching.

All inputs are float arrays shaped [N, C, H, W] with values in [0, 1];
attack budgets are expressed in that raw pixel scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """File contents do not match the expected binary layout."""


class DataLengthError(DataFormatError):
    """File is shorter or longer than its header declares."""


class DataConsistencyError(ValueError):
    """Image and label files disagree."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int64
    name: str = "dataset"
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be [N, C, H, W], got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise DataConsistencyError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("inputs must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def take(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx], split=split or self.split)


# -- IDX ----------------------------------------------------------------------

def _read_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise DataLengthError(f"{what}: file too short for IDX header")
    (m,) = struct.unpack(">I", raw[:4])
    if m != magic:
        raise DataFormatError(f"{what}: bad IDX magic 0x{m:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataLengthError(f"{what}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    n = int(np.prod(dims))
    body = raw[hdr:]
    if len(body) != n:
        raise DataLengthError(f"{what}: expected {n} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> Dataset:
    images = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, "labels")
    if len(images) != len(labels):
        raise DataConsistencyError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    y = labels.astype(np.int64)
    return Dataset(x, y, name=name, split=split, num_classes=max(10, int(y.max(initial=0)) + 1))


def _to_bytes(x: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(x, dtype=np.float64) * 255.0).astype(np.uint8)


def idx_bytes(dataset: Dataset) -> tuple[bytes, bytes]:
    """Serialise a single-channel dataset back to (images, labels) IDX bytes."""
    if dataset.inputs.shape[1] != 1:
        raise DataFormatError("IDX images are single-channel")
    n, _, h, w = dataset.inputs.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + _to_bytes(dataset.inputs[:, 0]).tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return img, lab


def save_idx(dataset: Dataset, images_path, labels_path):
    img, lab = idx_bytes(dataset)
    Path(images_path).write_bytes(img)
    Path(labels_path).write_bytes(lab)


# -- CIFAR-10 -----------------------------------------------------------------

def _read_cifar(raw: bytes, what: str):
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{what}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0]


def load_cifar10(batch_paths, split: str = "train") -> Dataset:
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    xs, ys = [], []
    for p in batch_paths:
        x, y = _read_cifar(Path(p).read_bytes(), str(p))
        xs.append(x)
        ys.append(y)
    x = np.concatenate(xs).astype(np.float32) / 255.0
    y = np.concatenate(ys).astype(np.int64)
    if y.size and y.max() >= 10:
        raise DataFormatError("CIFAR-10 label byte out of range")
    return Dataset(x, y, name="cifar10", split=split, num_classes=10)


def cifar10_bytes(dataset: Dataset) -> bytes:
    if dataset.inputs.shape[1:] != (3, 32, 32):
        raise DataFormatError("CIFAR-10 records are 3x32x32")
    n = len(dataset)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = _to_bytes(dataset.inputs).reshape(n, -1)
    return rec.tobytes()


def save_cifar10(dataset: Dataset, path):
    Path(path).write_bytes(cifar10_bytes(dataset))


# -- synthetic ----------------------------------------------------------------

def make_blobs(num_classes: int, per_class: int, dims: int, spread: float, seed: int = 0,
               split: str = "train", means: np.ndarray | None = None) -> Dataset:
    """Gaussian clusters around seeded class means, clipped to [0, 1].

    Means are drawn uniformly from [0.2, 0.8]^dims so that moderate spreads
    stay mostly inside the unit box. Inputs are shaped [N, 1, 1, dims].
    Passing the same ``means`` with a different seed yields a test split.
    """
    if num_classes <= 0 or per_class <= 0 or dims <= 0 or spread < 0:
        raise ValueError("make_blobs: parameters must be positive")
    rng = np.random.default_rng(seed)
    if means is None:
        means = rng.uniform(0.2, 0.8, size=(num_classes, dims))
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(0.0, 1.0, size=(len(labels), dims)) * spread
    x = np.clip(means[labels] + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(x[:, None, None, :], labels.astype(np.int64), name="blobs", split=split,
                   num_classes=num_classes)


def blob_means(num_classes: int, dims: int, seed: int) -> np.ndarray:
    """The class means make_blobs(seed=seed) draws when none are given."""
    return np.random.default_rng(seed).uniform(0.2, 0.8, size=(num_classes, dims))


def subset(dataset: Dataset, n: int, seed: int = 0, stratified: bool = False) -> Dataset:
    if n > len(dataset):
        raise ValueError(f"subset of {n} requested from {len(dataset)} samples")
    rng = np.random.default_rng(seed)
    if not stratified:
        return dataset.take(rng.permutation(len(dataset))[:n])
    classes = np.unique(dataset.labels)
    if n % len(classes):
        raise ValueError(f"stratified subset size {n} not divisible by {len(classes)} classes")
    k = n // len(classes)
    picks = []
    for c in classes:
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < k:
            raise ValueError(f"class {c} has only {len(idx)} samples, need {k}")
        picks.append(rng.permutation(idx)[:k])
    return dataset.take(np.sort(np.concatenate(picks)))


def split_train_test(dataset: Dataset, test_per_class: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified hold-out: ``test_per_class`` samples of each class go to test."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        test_idx.append(rng.permutation(idx)[:test_per_class])
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(dataset), dtype=bool)
    mask[test_idx] = False
    return dataset.take(np.flatnonzero(mask), "train"), dataset.take(test_idx, "test")


@dataclass
class BatchIterator:
    dataset: Dataset
    batch_size: int
    seed: int = 0
    drop_last: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self._epoch = 0

    def epoch_indices(self, epoch: int) -> list[np.ndarray]:
        n = len(self.dataset)
        order = np.random.default_rng([self.seed, epoch]).permutation(n) if self.shuffle else np.arange(n)
        stop = n - n % self.batch_size if self.drop_last else n
        return [order[i:i + self.batch_size] for i in range(0, stop, self.batch_size)]

    def __iter__(self):
        batches = self.epoch_indices(self._epoch)
        self._epoch += 1
        for idx in batches:
            yield self.dataset.inputs[idx], self.dataset.labels[idx], idx

    def __len__(self) -> int:
        n = len(self.dataset)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)


# -- desk-scale MNIST -----------------------------------------------------------

MNIST5K_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def prepare_mnist5k(out_dir, test_per_class: int = 100, seed: int = 0) -> dict:
    """Write the 5000-image MNIST sample bundled with mlxtend as IDX train/test files.

    The 500-per-class sample is split stratified into 4000 train / 1000 test
    images by default. Returns the written paths keyed as in MNIST5K_FILES.
    """
    import gzip
    import importlib.util

    out = Path(out_dir)
    paths = {k: out / v for k, v in MNIST5K_FILES.items()}
    if all(p.exists() for p in paths.values()):
        return paths
    spec = importlib.util.find_spec("mlxtend")
    if spec is None:
        raise FileNotFoundError("mlxtend is not installed; `pip install mlxtend` provides the MNIST sample")
    src = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    with gzip.open(src) as fh:
        raw = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    x = (raw[:, :-1].astype(np.float32) / 255.0).reshape(-1, 1, 28, 28)
    full = Dataset(x, raw[:, -1], name="mnist5k", split="train", num_classes=10)
    train, test = split_train_test(full, test_per_class, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    save_idx(train, paths["train_images"], paths["train_labels"])
    save_idx(test, paths["test_images"], paths["test_labels"])
    return paths
