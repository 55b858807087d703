"""Dataset ingestion: IDX (MNIST-style) and CIFAR-10 binary files, plus
synthetic generators for tests and offline runs.

CIFAR-10 binary layout: each record is 1 label byte followed by 3072 pixel
bytes (1024 red, 1024 green, 1024 blue, row-major 32x32); files hold
10000 records.  IDX layout: two zero bytes, a type code, the number of
dimensions, one big-endian uint32 per dimension, then the payload.
"""

from __future__ import annotations

import gzip
import os
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

_IDX_TYPES = {
    0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}


class DataFormatError(ValueError):
    """A dataset file does not match its documented binary layout."""


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into an array of its declared type and shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at offset 0 ({len(raw)} bytes)")
    if raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: bad magic at offset 0: expected 00 00, got {raw[:2].hex()}")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DataFormatError(f"{path}: unknown type code 0x{code:02x} at offset 2")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension list at offset 4")
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise DataFormatError(
            f"{path}: payload at offset {header} has {len(raw) - header} bytes, "
            f"dimensions {dims} need {expected}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    codes = {v: k for k, v in _IDX_TYPES.items()}
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    if dtype not in codes:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = bytes([0, 0, codes[dtype], arr.ndim]) + b"".join(
        int(d).to_bytes(4, "big") for d in arr.shape)
    _atomic_write(path, header + arr.astype(dtype).tobytes())


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(images uint8 (N, 3, 32, 32), labels int64)`` of one batch file."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        full = len(raw) // CIFAR_RECORD
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"record {full} is truncated at offset {full * CIFAR_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(
            f"{path}: label {labels[bad[0]]} out of range at offset {bad[0] * CIFAR_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    if images.shape[1] != CIFAR_RECORD - 1:
        raise ValueError(f"CIFAR images must be 3x32x32, got {images.shape[1]} values")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    _atomic_write(path, rec.tobytes())


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# -- in-memory datasets ---------------------------------------------------------------


@dataclass
class ArrayDataset:
    """Float images/features with integer labels and deterministic batching."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, n: int) -> "ArrayDataset":
        return ArrayDataset(self.x[:n], self.y[:n])

    def batches(self, batch_size: int, shuffle: bool = True, seed: int = 0, epoch: int = 0,
                drop_last: bool = False, augment: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield every sample once; order depends only on ``(seed, epoch)``."""
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        stop = len(self) - (len(self) % batch_size if drop_last else 0)
        for start in range(0, stop, batch_size):
            idx = order[start:start + batch_size]
            xb = self.x[idx]
            if augment and xb.ndim == 4:
                xb = _crop_flip(xb, rng)
            yield xb, self.y[idx]


def _crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def prefetch(iterable: Iterable, size: int = 2) -> Iterator:
    """Run ``iterable`` on a producer thread behind a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=size)
    done = object()

    def produce():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # re-raised on the consumer side
            q.put(exc)
        q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def _normalize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tr = train.astype(np.float32) / 255.0
    te = test.astype(np.float32) / 255.0
    mean = tr.mean(axis=(0, 2, 3), keepdims=True)
    std = tr.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    return (tr - mean) / std, (te - mean) / std


# -- loaders --------------------------------------------------------------------------


def load_cifar10(path) -> tuple[ArrayDataset, ArrayDataset]:
    path = Path(path)
    train_files = [path / f for f in CIFAR_TRAIN_FILES if (path / f).exists()
                   or (path / (f + ".gz")).exists()]
    if not train_files:
        raise FileNotFoundError(f"no CIFAR-10 training batches under {path}")
    xs, ys = zip(*(read_cifar_batch(f) for f in train_files))
    xt, yt = read_cifar_batch(path / CIFAR_TEST_FILE)
    xtr, xte = _normalize(np.concatenate(xs), xt)
    return ArrayDataset(xtr, np.concatenate(ys)), ArrayDataset(xte, yt)


def load_mnist(path, rgb32: bool = True) -> tuple[ArrayDataset, ArrayDataset]:
    """MNIST IDX files; with ``rgb32`` images are padded to 32x32 and repeated to 3 channels."""
    path = Path(path)
    out = []
    raw = {}
    for split, (img_f, lab_f) in MNIST_FILES.items():
        images = read_idx(path / img_f)
        labels = read_idx(path / lab_f).astype(np.int64)
        if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
            raise DataFormatError(
                f"{path}: {split} images {images.shape} and labels {labels.shape} disagree")
        images = images[:, None]
        if rgb32:
            images = np.repeat(np.pad(images, ((0, 0), (0, 0), (2, 2), (2, 2))), 3, axis=1)
        raw[split] = (images, labels)
    xtr, xte = _normalize(raw["train"][0], raw["test"][0])
    out = ArrayDataset(xtr, raw["train"][1]), ArrayDataset(xte, raw["test"][1])
    return out


def make_blobs(n: int, num_classes: int = 4, dim: int = 16, separation: float = 10.0,
               seed: int = 0, shape: tuple[int, ...] | None = None) -> ArrayDataset:
    """Isotropic unit-variance Gaussian clusters whose centres are ``separation`` apart
    along distinct axes (so any two centres are ``separation * sqrt(2)`` apart)."""
    if dim < num_classes:
        raise ValueError("dim must be at least num_classes")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, num_classes, n)
    centres = np.zeros((num_classes, dim))
    centres[np.arange(num_classes), np.arange(num_classes)] = separation
    x = centres[y] + rng.standard_normal((n, dim))
    if shape is not None:
        x = x.reshape((n,) + tuple(shape))
    return ArrayDataset(x.astype(np.float32), y.astype(np.int64))


def synthetic_cifar_arrays(n: int, seed: int = 0, noise: float = 1.2, distractor: float = 0.85,
                           jitter: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Procedural 10-class 3x32x32 uint8 images.

    Each class has a fixed grating orientation/frequency and a colour pair;
    samples jitter orientation, frequency, phase and position, and overlay a
    weaker grating from a random other class plus pixel noise.  ``jitter``
    is the orientation spread in radians; classes sit pi/10 apart, so values
    near 0.2 make neighbouring classes overlap.
    """
    proto = np.random.default_rng(20240611)
    theta = np.linspace(0, np.pi, 10, endpoint=False) + proto.uniform(-0.05, 0.05, 10)
    freq = proto.uniform(0.08, 0.22, 10)
    col = proto.uniform(-1, 1, (10, 3))
    col /= np.linalg.norm(col, axis=1, keepdims=True)
    col2 = proto.uniform(-1, 1, (10, 3))

    rng = np.random.default_rng(seed)
    y = rng.integers(0, 10, n)
    other = (y + rng.integers(1, 10, n)) % 10
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)

    def grating(cls, amp):
        th = theta[cls] + rng.normal(0, jitter, n)
        f = freq[cls] * rng.uniform(0.9, 1.1, n)
        ph = rng.uniform(0, 2 * np.pi, n)
        arg = (xx[None] * np.cos(th)[:, None, None] + yy[None] * np.sin(th)[:, None, None])
        g = np.sin(2 * np.pi * f[:, None, None] * arg + ph[:, None, None])
        return amp * g[:, None] * col[cls][:, :, None, None]

    img = grating(y, 1.0) + grating(other, distractor)
    cy, cx = rng.uniform(8, 24, n), rng.uniform(8, 24, n)
    bump = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / 40.0)
    img += 0.8 * bump[:, None] * col2[y][:, :, None, None]
    img += noise * rng.standard_normal(img.shape)
    return np.clip(128 + 60 * img, 0, 255).astype(np.uint8), y.astype(np.int64)


def write_synthetic_cifar(path, n_train: int = 5000, n_test: int = 1000, seed: int = 0,
                          **kw) -> None:
    """Write a synthetic dataset in the CIFAR-10 binary layout."""
    path = Path(path)
    xtr, ytr = synthetic_cifar_arrays(n_train, seed=seed, **kw)
    xte, yte = synthetic_cifar_arrays(n_test, seed=seed + 10_000, **kw)
    chunks = np.array_split(np.arange(n_train), min(5, max(1, n_train // 10_000 + 1)))
    for i, idx in enumerate(chunks):
        write_cifar_batch(path / CIFAR_TRAIN_FILES[i], xtr[idx], ytr[idx])
    for stale in CIFAR_TRAIN_FILES[len(chunks):]:
        (path / stale).unlink(missing_ok=True)
    write_cifar_batch(path / CIFAR_TEST_FILE, xte, yte)


def load_dataset(kind: str, path=None, **kw) -> tuple[ArrayDataset, ArrayDataset]:
    """Return ``(train, test)`` datasets.

    kind: ``cifar10`` and ``mnist`` read files under ``path``;
    ``synthetic_cifar`` generates CIFAR-format files under ``path`` when
    missing and reads them back; ``blobs`` is generated in memory.
    """
    if kind == "cifar10":
        return load_cifar10(path)
    if kind == "mnist":
        return load_mnist(path, rgb32=kw.get("rgb32", True))
    if kind == "synthetic_cifar":
        if path is None:
            raise ValueError("synthetic_cifar needs a directory to hold the generated files")
        n_train = int(kw.get("n_train", 5000))
        n_test = int(kw.get("n_test", 1000))
        seed = int(kw.get("seed", 0))
        marker = Path(path) / f"synthetic_{n_train}_{n_test}_{seed}.ok"
        if not marker.exists():
            # the files are shared between configurations, so older markers go stale
            for old in Path(path).glob("synthetic_*.ok"):
                old.unlink()
            write_synthetic_cifar(path, n_train, n_test, seed)
            marker.write_text("generated\n")
        return load_cifar10(path)
    if kind == "blobs":
        n = int(kw.get("n", 512))
        seed = int(kw.get("seed", 0))
        common = dict(num_classes=int(kw.get("num_classes", 4)), dim=int(kw.get("dim", 16)),
                      separation=float(kw.get("separation", 10.0)), shape=kw.get("shape"))
        return make_blobs(n, seed=seed, **common), make_blobs(n // 4 or 1, seed=seed + 1, **common)
    raise ValueError(f"unknown dataset kind {kind!r}")
