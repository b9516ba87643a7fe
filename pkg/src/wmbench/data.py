"""Builtin synthetic digit task and MNIST-style IDX ingestion."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Dataset, _rng

# seven-segment layout on a 10x6 box: (row0, col0, row1, col1) inclusive
_SEGMENTS = {
    "a": (0, 0, 0, 5), "b": (0, 5, 4, 5), "c": (5, 5, 9, 5), "d": (9, 0, 9, 5),
    "e": (5, 0, 9, 0), "f": (0, 0, 4, 0), "g": (4, 0, 4, 5),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def glyph(digit, size=16):
    """Seven-segment rendering of ``digit`` (0..9) centred on a size x size canvas."""
    img = np.zeros((size, size), dtype=np.float32)
    top, left = (size - 10) // 2, (size - 6) // 2
    for seg in _DIGITS[digit % 10]:
        r0, c0, r1, c1 = _SEGMENTS[seg]
        img[top + r0:top + r1 + 1, left + c0:left + c1 + 1] = 1.0
    return img


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int = 10
    size: int = 16
    noise: float = 0.25
    max_shift: int = 2
    train_size: int = 3000
    test_size: int = 1000
    holdout_size: int = 1000

    def __post_init__(self):
        if not 2 <= self.num_classes <= 10:
            raise ValueError("builtin task supports 2..10 classes")


def make_split(spec, n, seed):
    """``n`` balanced samples: glyph, random stroke gain, shift, Gaussian noise."""
    rng = _rng(seed)
    labels = np.arange(n) % spec.num_classes
    labels = labels[rng.permutation(n)]
    bases = np.stack([glyph(c, spec.size) for c in range(spec.num_classes)])
    gain = rng.uniform(0.6, 1.0, size=(n, 1, 1))
    imgs = bases[labels] * gain
    shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(shifts):
        imgs[i] = np.roll(imgs[i], (dy, dx), axis=(0, 1))
    imgs = imgs + rng.normal(0.0, spec.noise, size=imgs.shape)
    imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
    return Dataset(imgs[..., None], labels)


@dataclass
class TaskData:
    train: Dataset
    test: Dataset
    holdout: Dataset  # same-distribution data reserved for attackers

    @property
    def num_classes(self):
        return int(max(self.train.labels.max(), self.test.labels.max())) + 1

    @property
    def image_shape(self):
        return self.train.images.shape[1:]


def synthetic_task(seed=0, spec=None):
    spec = spec or SyntheticTaskSpec()
    base = int(seed) * 3
    return TaskData(
        make_split(spec, spec.train_size, base + 1),
        make_split(spec, spec.test_size, base + 2),
        make_split(spec, spec.holdout_size, base + 3),
    )


# -- IDX -------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path):
    """Read an unsigned-byte IDX file (images or labels) into a uint8 array."""
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise ValueError(f"{path}: unsupported IDX magic {magic:#010x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    offset = 4 + 4 * ndim
    if len(blob) - offset != count:
        raise ValueError(f"{path}: expected {count} payload bytes, found {len(blob) - offset}")
    return np.frombuffer(blob, dtype=np.uint8, offset=offset).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}[array.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx_dataset(images_path, labels_path):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise ValueError("expected 3-D image file and 1-D label file")
    return Dataset(images[..., None].astype(np.float32) / 255.0, labels.astype(np.int64))
