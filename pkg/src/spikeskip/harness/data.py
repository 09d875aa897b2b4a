"""Datasets: desk-scale synthetic spike tasks and IDX (MNIST-format) ingestion."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from ..engine import poisson_encode

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTHETIC_KINDS = ("two_pattern_poisson", "rate_bars")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Labelled samples.

    ``inputs`` is ``(N, T, *shape)`` binary spikes when ``encoded`` is true,
    otherwise ``(N, *shape)`` intensities in [0, 1] that are Poisson-encoded
    on demand.
    """

    inputs: Tensor
    labels: Tensor
    encoded: bool = True
    n_classes: int = 2

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DatasetError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise DatasetError("dataset is empty")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[2:] if self.encoded else self.inputs.shape[1:])

    def subset(self, index) -> "Dataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return Dataset(self.inputs[index], self.labels[index], self.encoded, self.n_classes)

    def spikes(self, index, T: int, seed: int = 0, dtype=torch.float32) -> Tensor:
        """Time-major spike batch ``(T, B, *shape)`` for the samples in ``index``."""
        index = torch.as_tensor(index, dtype=torch.long)
        if self.encoded:
            x = self.inputs[index]
            if x.shape[1] < T:
                raise DatasetError(f"samples carry {x.shape[1]} time steps, {T} requested")
            return x[:, :T].transpose(0, 1).to(dtype)
        return poisson_encode(self.inputs[index].numpy(), T, seed).to(dtype)


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


def generate_synthetic(
    kind: str,
    n_train: int,
    n_test: int,
    channels: int = 16,
    seed: int = 0,
    T: int = 25,
    spatial: int = 4,
    high_rate: float = 0.8,
    low_rate: float = 0.1,
) -> tuple[Dataset, Dataset]:
    """Build a two-class (train, test) pair.

    ``two_pattern_poisson``: class 0 fires at ``high_rate`` on the first half
    of the channels and ``low_rate`` on the rest; class 1 is the mirror image.
    Samples are pre-encoded as ``T``-step spike trains on a ``spatial`` x
    ``spatial`` grid per channel.

    ``rate_bars``: a bright bar on a dim ``spatial`` x ``spatial`` grid, horizontal
    for class 0 and vertical for class 1, replicated over ``channels``.  Kept
    as intensities and encoded per batch.
    """
    if n_train < 1 or n_test < 1:
        raise DatasetError("n_train and n_test must be at least 1")
    if kind not in SYNTHETIC_KINDS:
        raise DatasetError(f"unknown synthetic dataset {kind!r}; choose from {SYNTHETIC_KINDS}")
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    labels = np.concatenate([_balanced_labels(n_train, 2, rng), _balanced_labels(n_test, 2, rng)])

    if kind == "two_pattern_poisson":
        if channels < 2:
            raise DatasetError(f"two_pattern_poisson needs at least 2 channels, got {channels}")
        half = channels // 2
        rates = np.full((n, channels, spatial, spatial), low_rate, dtype=np.float32)
        rates[labels == 0, :half] = high_rate
        rates[labels == 1, half:] = high_rate
        spikes = poisson_encode(rates, T, int(rng.integers(2**31))).transpose(0, 1)
        inputs, encoded = spikes.to(torch.uint8).contiguous(), True
    else:
        if spatial < 3:
            raise DatasetError("rate_bars needs a grid of at least 3x3")
        grid = np.full((n, spatial, spatial), 0.05, dtype=np.float32)
        pos = rng.integers(0, spatial, size=n)
        for i in range(n):
            if labels[i] == 0:
                grid[i, pos[i], :] = 0.9
            else:
                grid[i, :, pos[i]] = 0.9
        inputs = torch.from_numpy(np.repeat(grid[:, None], channels, axis=1))
        encoded = False

    y = torch.from_numpy(labels.astype(np.int64))
    train = Dataset(inputs[:n_train], y[:n_train], encoded, 2)
    test = Dataset(inputs[n_train:], y[n_train:], encoded, 2)
    return train, test


def stratified_split(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off roughly ``fraction`` of each class as a held-out set."""
    rng = np.random.default_rng(seed)
    labels = data.labels.numpy()
    keep, held = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * len(idx)))
        held.extend(idx[:k])
        keep.extend(idx[k:])
    if not keep or not held:
        raise DatasetError(f"split fraction {fraction} leaves an empty part")
    return data.subset(sorted(keep)), data.subset(sorted(held))


# --- IDX ------------------------------------------------------------------


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise DatasetError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array) -> None:
    """Write a uint8 array as IDX (ubyte element type)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair as intensity grids ``(N, 1, H, W)`` in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    x = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    y = torch.from_numpy(labels.astype(np.int64))
    return Dataset(x, y, encoded=False, n_classes=max(2, int(labels.max()) + 1 if len(labels) else 2))
