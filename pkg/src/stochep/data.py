"""Dataset ingestion and synthesis.

Three concerns live here: the big-endian IDX image/label format, a
synthetic moving-bar sequence task standing in for event-camera data at
desk scale, and the batching glue (deterministic shuffling plus one-hot
expansion onto widened output layers).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import derive

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_ROOT_ENV = "STOCHEP_DATA_ROOT"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """The file is not the IDX variant we accept."""


class TruncatedFileError(IOError):
    """The file ends before its header says it should."""


class ConsistencyError(ValueError):
    """Images and labels disagree about the sample count."""


@dataclass
class Dataset:
    """Static images in [0,1], shape (n, channels, h, w), with integer
    labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError("images must be a non-empty (n, c, h, w) array")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0,1]: [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


@dataclass
class SequenceDataset:
    """Frame sequences in [0,1], shape (n, frames, channels, h, w)."""

    sequences: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.sequences.ndim != 5 or len(self.sequences) == 0:
            raise ValueError(
                "sequences must be a non-empty (n, frames, c, h, w) array")
        if len(self.sequences) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.sequences)} sequences but {len(self.labels)} labels")
        lo, hi = float(self.sequences.min()), float(self.sequences.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"frame values outside [0,1]: [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.sequences)


# ---------------------------------------------------------------------------
# IDX files

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic number")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise IdxFormatError(
            f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header cut off")
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big")
                 for i in range(ndim))
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise TruncatedFileError(
            f"{path}: {len(raw) - header} data bytes, header promises {count}")
    if len(raw) > header + count:
        raise IdxFormatError(f"{path}: trailing bytes after the data block")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair: unsigned bytes, big-endian dims,
    pixels scaled to [0,1]."""
    pixels = _read_idx(images_path, IMAGES_MAGIC, ndim=3)
    labels = _read_idx(labels_path, LABELS_MAGIC, ndim=1)
    if len(pixels) != len(labels):
        raise ConsistencyError(
            f"{len(pixels)} images in {images_path} but {len(labels)} labels "
            f"in {labels_path}")
    images = (pixels.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64))


def save_idx(dataset: Dataset, images_path, labels_path):
    """Inverse of load_idx, for fixtures; round-trips bit-exactly."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX stores single-channel images")
    with open(images_path, "wb") as f:
        f.write(IMAGES_MAGIC.to_bytes(4, "big"))
        for d in (n, h, w):
            f.write(d.to_bytes(4, "big"))
        f.write(np.round(dataset.images[:, 0] * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(LABELS_MAGIC.to_bytes(4, "big"))
        f.write(n.to_bytes(4, "big"))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def data_root(default: str = "data") -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, default))


def find_mnist(root=None, split: str = "train"):
    """Paths of the standard MNIST IDX pair under `root`, or None if
    either file is absent."""
    base = Path(root) if root is not None else data_root()
    images, labels = (base / name for name in MNIST_FILES[split])
    if images.is_file() and labels.is_file():
        return images, labels
    return None


# ---------------------------------------------------------------------------
# synthetic sequences

def make_moving_bar(n_samples: int, frames: int, size: int,
                    seed: int) -> SequenceDataset:
    """A vertical bar drifting one column per frame, wrapping around.

    Class 0 moves left (column index decreases), class 1 moves right;
    labels alternate so the split is exactly even for even n_samples.
    Each frame has two channels, the bar's current column and its
    previous one, so a single frame already carries the motion cue the
    way consecutive event-camera slices do.
    """
    if frames < 2:
        raise ValueError(f"need at least 2 frames, got {frames}")
    gen = derive(seed, "moving-bar")
    labels = np.arange(n_samples) % 2
    starts = gen.integers(0, size, n_samples)
    seqs = np.zeros((n_samples, frames, 2, size, size))
    for i in range(n_samples):
        step = 1 if labels[i] == 1 else -1
        for tau in range(frames):
            here = (starts[i] + step * tau) % size
            before = (here - step) % size
            seqs[i, tau, 0, :, here] = 1.0
            seqs[i, tau, 1, :, before] = 1.0
    return SequenceDataset(seqs, labels)


# ---------------------------------------------------------------------------
# batching

def expand_labels(labels, n_classes: int, n_perclass: int = 1) -> np.ndarray:
    """One-hot targets widened for an augmented output layer: label c
    sets the contiguous block [c * n_perclass, (c+1) * n_perclass)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label outside [0, n_classes)")
    out = np.zeros((len(labels), n_classes * n_perclass))
    rows = np.arange(len(labels))[:, None]
    cols = labels[:, None] * n_perclass + np.arange(n_perclass)[None, :]
    out[rows, cols] = 1.0
    return out


def batches(dataset, batch_size: int, shuffle_seed=None, *, n_classes: int,
            n_perclass: int = 1, input_shape=None):
    """Yield (sample_indices, inputs, expanded_targets) batches.

    The indices name each sample globally, which is what addresses its
    private spike streams.  shuffle_seed=None keeps dataset order; any
    integer gives one deterministic permutation (pass a fresh value per
    epoch).  input_shape reshapes static images per sample, e.g. to
    flatten for a dense input layer.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    x = dataset.sequences if isinstance(dataset, SequenceDataset) else dataset.images
    n = len(x)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = derive(shuffle_seed, "shuffle").permutation(n)
    if input_shape is not None:
        x = x.reshape((n,) + tuple(input_shape))
    y = expand_labels(dataset.labels, n_classes, n_perclass)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield idx, x[idx], y[idx]
