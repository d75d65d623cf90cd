"""Dataset loading from the canonical binary distributions, plus batch
iteration, subsetting, and a small tensor-batch interchange format.

All image datasets land in memory as float32 [N, C, H, W] scaled to
[0, 1], labels as int64.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError

__all__ = [
    "Dataset",
    "SubsetSpec",
    "load_cifar10",
    "load_cifar100",
    "load_fashion_mnist",
    "load_dataset",
    "subset",
    "stratified_head",
    "batches",
    "write_tensor_batch",
    "read_tensor_batch",
]

CIFAR10_RECORD = 3073   # label byte + 3 * 1024 pixel planes
CIFAR100_RECORD = 3074  # coarse byte + fine byte + 3 * 1024 pixel planes


@dataclass
class Dataset:
    name: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str

    def __len__(self) -> int:
        return self.images.shape[0]


def _find_root(path, candidates: tuple[str, ...], probe: str) -> Path:
    path = Path(path)
    for cand in ("",) + candidates:
        root = path / cand if cand else path
        hits = list(root.glob(probe)) if root.is_dir() else []
        if hits:
            return root
    raise FileNotFoundError(f"no dataset files matching {probe!r} under {path}")


def _read_cifar_records(path: Path, record_size: int, label_offset: int, num_classes: int):
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size % record_size:
        whole = raw.size // record_size
        raise IntegrityError(
            f"{path}: {raw.size} bytes is not a whole number of {record_size}-byte records "
            f"(expected {(whole + 1) * record_size} for {whole + 1} records, got {raw.size})"
        )
    if raw.size == 0:
        raise IntegrityError(f"{path}: empty dataset file")
    records = raw.reshape(-1, record_size)
    labels = records[:, label_offset]
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise IntegrityError(
            f"{path}: label byte {int(labels[i])} at offset {i * record_size + label_offset} "
            f"outside 0..{num_classes - 1}"
        )
    # Pixel planes are R, G, B, each 1024 bytes in row-major 32x32 order.
    images = records[:, label_offset + 1 :].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels.astype(np.int64)


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    """Load the CIFAR-10 binary distribution (data_batch_1..5.bin, test_batch.bin)."""
    root = _find_root(path, ("cifar-10-batches-bin",), "data_batch_1.bin")
    train_parts = [
        _read_cifar_records(root / f"data_batch_{i}.bin", CIFAR10_RECORD, 0, 10)
        for i in range(1, 6)
    ]
    test_images, test_labels = _read_cifar_records(root / "test_batch.bin", CIFAR10_RECORD, 0, 10)
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    return (
        Dataset("cifar10", images, labels, 10, "train"),
        Dataset("cifar10", test_images, test_labels, 10, "test"),
    )


def load_cifar100(path) -> tuple[Dataset, Dataset]:
    """Load the CIFAR-100 binary distribution (train.bin, test.bin); uses fine labels."""
    root = _find_root(path, ("cifar-100-binary",), "train.bin")
    train = _read_cifar_records(root / "train.bin", CIFAR100_RECORD, 1, 100)
    test = _read_cifar_records(root / "test.bin", CIFAR100_RECORD, 1, 100)
    return (
        Dataset("cifar100", train[0], train[1], 100, "train"),
        Dataset("cifar100", test[0], test[1], 100, "test"),
    )


def _read_maybe_gzip(path: Path) -> bytes:
    blob = path.read_bytes()
    if blob[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(blob)
        except (OSError, EOFError) as exc:
            raise IntegrityError(f"{path}: gzip stream is corrupt ({exc})") from exc
    return blob


def _read_idx(path: Path, expect_magic: int) -> np.ndarray:
    """Parse an idx file: u32 magic, u32 dim sizes, then unsigned bytes,
    all big-endian."""
    blob = _read_maybe_gzip(path)
    if len(blob) < 4:
        raise IntegrityError(f"{path}: only {len(blob)} bytes, no idx magic")
    magic, = struct.unpack(">I", blob[:4])
    if magic != expect_magic:
        raise IntegrityError(f"{path}: magic {magic:#010x}, expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IntegrityError(f"{path}: truncated idx header ({len(blob)} bytes, need {header_len})")
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    count = int(np.prod(dims))
    if len(blob) != header_len + count:
        raise IntegrityError(
            f"{path}: payload is {len(blob) - header_len} bytes, dims {dims} require {count}"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=header_len).reshape(dims)


def _idx_file(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = root / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{root}: missing {stem}[.gz]")


def _load_fashion_split(root: Path, prefix: str, split: str) -> Dataset:
    images = _read_idx(_idx_file(root, f"{prefix}-images-idx3-ubyte"), 0x00000803)
    labels = _read_idx(_idx_file(root, f"{prefix}-labels-idx1-ubyte"), 0x00000801)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise IntegrityError(f"{root}/{prefix}: image dims {images.shape}, expected (N, 28, 28)")
    if labels.ndim != 1:
        raise IntegrityError(f"{root}/{prefix}: label dims {labels.shape}, expected (N,)")
    if images.shape[0] != labels.shape[0]:
        raise IntegrityError(
            f"{root}/{prefix}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        raise IntegrityError(
            f"{root}/{prefix}: label {int(labels[bad[0]])} at index {int(bad[0])} outside 0..9"
        )
    pixels = images.reshape(-1, 1, 28, 28).astype(np.float32) / 255.0
    return Dataset("fashion_mnist", pixels, labels.astype(np.int64), 10, split)


def load_fashion_mnist(path) -> tuple[Dataset, Dataset]:
    """Load Fashion-MNIST idx files (train-*/t10k-*, raw or gzipped)."""
    root = _find_root(path, ("fashion-mnist", "FashionMNIST/raw"), "train-images-idx3-ubyte*")
    return (
        _load_fashion_split(root, "train", "train"),
        _load_fashion_split(root, "t10k", "test"),
    )


_LOADERS = {
    "cifar10": load_cifar10,
    "cifar100": load_cifar100,
    "fashion_mnist": load_fashion_mnist,
}


def load_dataset(name: str, root) -> tuple[Dataset, Dataset]:
    if name not in _LOADERS:
        raise ValueError(f"unknown dataset {name!r}, expected one of {sorted(_LOADERS)}")
    return _LOADERS[name](root)


@dataclass
class SubsetSpec:
    per_class_count: int
    seed: int = 0


def subset(dataset: Dataset, spec: SubsetSpec) -> Dataset:
    """Stratified random subset: the same number of examples from each class."""
    if spec.per_class_count < 1:
        raise ValueError(f"per_class_count must be positive, got {spec.per_class_count}")
    rng = np.random.default_rng(spec.seed)
    chosen = []
    for c in range(dataset.num_classes):
        members = np.nonzero(dataset.labels == c)[0]
        if members.size < spec.per_class_count:
            raise ValueError(
                f"class {c} has {members.size} examples, cannot draw {spec.per_class_count}"
            )
        pick = rng.permutation(members.size)[: spec.per_class_count]
        chosen.append(members[pick])
    order = np.concatenate(chosen)
    order = order[rng.permutation(order.size)]
    return Dataset(
        dataset.name, dataset.images[order], dataset.labels[order],
        dataset.num_classes, dataset.split,
    )


def stratified_head(dataset: Dataset, count: int, seed: int = 0) -> Dataset:
    """At most ``count`` examples, spread as evenly over classes as the
    data allows. Used to cap attack-time evaluation cost."""
    if count >= len(dataset):
        return dataset
    per_class = count // dataset.num_classes
    if per_class < 1:
        raise ValueError(f"count {count} is below one example per class ({dataset.num_classes})")
    return subset(dataset, SubsetSpec(per_class_count=per_class, seed=seed))


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None):
    """Yield (images, labels) in a deterministic order; a seed shuffles."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        sl = order[start : start + batch_size]
        yield dataset.images[sl], dataset.labels[sl]


# Tensor-batch interchange: fixed header, then per-item label + pixels.
#
#     offset  size  field
#     0       4     magic b"ADVT"
#     4       4     item count N (u32, little-endian)
#     8       12    C, H, W (u32 each)
#     20      ...   N items: u16 label + C*H*W little-endian float32

ADVT_MAGIC = b"ADVT"


def write_tensor_batch(path, images: np.ndarray, labels: np.ndarray) -> Path:
    path = Path(path)
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise ValueError(f"tensor batch must be [N, C, H, W], got shape {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {images.shape[0]} items")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("labels must fit in an unsigned 16-bit field")
    n, c, h, w = images.shape
    item = np.dtype([("label", "<u2"), ("pixels", "<f4", (c * h * w,))])
    packed = np.empty(n, dtype=item)
    packed["label"] = labels.astype("<u2")
    packed["pixels"] = images.reshape(n, -1)
    header = ADVT_MAGIC + struct.pack("<4I", n, c, h, w)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + packed.tobytes())
    return path


def read_tensor_batch(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 20:
        raise IntegrityError(f"{path}: {len(blob)} bytes is too short for a tensor batch header")
    if blob[:4] != ADVT_MAGIC:
        raise IntegrityError(f"{path}: bad magic, not a tensor batch file")
    n, c, h, w = struct.unpack("<4I", blob[4:20])
    item = np.dtype([("label", "<u2"), ("pixels", "<f4", (c * h * w,))])
    expected = 20 + n * item.itemsize
    if len(blob) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes for {n} items, got {len(blob)}")
    packed = np.frombuffer(blob, dtype=item, offset=20)
    images = packed["pixels"].reshape(n, c, h, w).copy()
    labels = packed["label"].astype(np.int64)
    return images, labels
