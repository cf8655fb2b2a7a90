"""Datasets: IDX files, synthetic class-structured images, and client partitions."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MIN_GROUP_SIZE = 5


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError("images must have shape (n, H, W)")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if self.groups is not None and len(self.groups) != len(self.labels):
            raise ValueError("group and label counts differ")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        groups = None if self.groups is None else self.groups[indices]
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, groups)


def _open(path: Path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path, magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file, checking the expected magic number."""
    with _open(Path(path)) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ValueError("write_idx handles uint8 arrays of 1 or 3 dimensions")
    magic = IDX_LABELS_MAGIC if array.ndim == 1 else IDX_IMAGES_MAGIC
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(images / 255.0, labels.astype(np.int64), k)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the overlap of output cell i with each input cell, normalised."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def downsample(images: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Area-average resize of (n, H, W) images to ``size``."""
    h_out, w_out = (size, size) if np.isscalar(size) else size
    _, h, w = images.shape
    rows, cols = _area_matrix(h, h_out), _area_matrix(w, w_out)
    return np.einsum("ih,nhw,jw->nij", rows, images, cols)


def resize_dataset(data: Dataset, size: int) -> Dataset:
    if data.image_shape == (size, size):
        return data
    return Dataset(downsample(data.images, size), data.labels, data.num_classes, data.groups)


def _blob(size: int, cy: float, cx: float, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))


def make_synthetic_dataset(num_classes: int = 10, per_class: int = 100, image_size: int = 8,
                           seed: int = 0, blobs: int = 2, jitter: float = 0.35,
                           pixel_noise: float = 0.05, pattern_seed: int = 0) -> Dataset:
    """Class-conditional blob images.

    Each class owns ``blobs`` distinct anchor positions on a lattice, fixed by
    ``pattern_seed``; samples (drawn with ``seed``) jitter the anchors, vary
    amplitude and width, and add pixel noise. Train and test sets share a
    pattern seed and differ in ``seed``.
    """
    rng = np.random.default_rng([seed, 7])
    margin = 1.5
    axis = np.linspace(margin, image_size - 1 - margin, max(3, image_size - 2))
    lattice = np.array([(y, x) for y in axis for x in axis])
    if num_classes * blobs > len(lattice):
        raise ValueError("too many classes for the image size")
    pattern_rng = np.random.default_rng([pattern_seed, 5])
    picks = pattern_rng.permutation(len(lattice))[:num_classes * blobs]
    anchors = lattice[picks].reshape(num_classes, blobs, 2)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.empty((len(labels), image_size, image_size))
    for i, c in enumerate(labels):
        img = np.zeros((image_size, image_size))
        for cy, cx in anchors[c]:
            dy, dx = rng.normal(0.0, jitter, size=2)
            img += rng.uniform(0.7, 1.0) * _blob(image_size, cy + dy, cx + dx, rng.uniform(0.8, 1.2))
        images[i] = img + rng.normal(0.0, pixel_noise, size=img.shape)
    order = rng.permutation(len(labels))
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order], num_classes)


def make_grouped_dataset(num_groups: int = 30, mean_group_size: float = 8.0, num_classes: int = 2,
                         image_size: int = 8, seed: int = 0) -> Dataset:
    """Synthetic data where every sample belongs to a group (one future client each).

    Group sizes are Poisson distributed, so some groups fall below the
    minimum size and get excluded by :func:`partition_by_group`.
    """
    rng = np.random.default_rng([seed, 11])
    sizes = np.maximum(rng.poisson(mean_group_size, size=num_groups), 1)
    base = make_synthetic_dataset(num_classes, int(sizes.sum()), image_size, seed)
    n = int(sizes.sum())
    groups = np.repeat(np.arange(num_groups), sizes)
    images = base.images[:n].copy()
    labels = base.labels[:n].copy()
    # per-group brightness shift stands in for identity-specific appearance
    shift = rng.normal(0.0, 0.05, size=num_groups)[groups]
    images = np.clip(images + shift[:, None, None], 0.0, 1.0)
    return Dataset(images, labels, num_classes, groups)


def train_test_split(data: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng([seed, 13])
    perm = rng.permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


ShardMap = dict[int, np.ndarray]


def partition_iid(n: int, num_clients: int, rng: np.random.Generator) -> ShardMap:
    """Shuffle ``range(n)`` and cut it into ``num_clients`` near-equal shards."""
    if not 1 <= num_clients <= n:
        raise ValueError(f"cannot split {n} samples across {num_clients} clients")
    perm = rng.permutation(n)
    return {cid: np.sort(part) for cid, part in enumerate(np.array_split(perm, num_clients))}


def partition_by_group(groups: np.ndarray, rng: np.random.Generator,
                       min_size: int = MIN_GROUP_SIZE,
                       test_fraction: float = 0.1) -> tuple[ShardMap, np.ndarray]:
    """One client per group with at least ``min_size`` samples.

    About ``test_fraction`` of each kept group (at least one sample) is held
    out; the held-out indices form the central test set.
    """
    if groups is None:
        raise ValueError("dataset has no group labels")
    groups = np.asarray(groups)
    shards: ShardMap = {}
    test: list[np.ndarray] = []
    for gid in np.unique(groups):
        members = np.flatnonzero(groups == gid)
        if len(members) < min_size:
            continue
        members = rng.permutation(members)
        n_test = max(1, int(np.floor(test_fraction * len(members) + 0.5)))
        test.append(members[:n_test])
        shards[len(shards)] = np.sort(members[n_test:])
    held_out = np.sort(np.concatenate(test)) if test else np.zeros(0, dtype=np.int64)
    return shards, held_out


def partition(data: Dataset, scheme: str, rng: np.random.Generator,
              num_clients: int | None = None) -> tuple[ShardMap, np.ndarray]:
    """Dispatch on ``scheme`` ('iid' or 'group'); returns shards and held-out indices."""
    if scheme == "iid":
        if num_clients is None:
            raise ValueError("iid partitioning needs num_clients")
        return partition_iid(len(data), num_clients, rng), np.zeros(0, dtype=np.int64)
    if scheme == "group":
        return partition_by_group(data.groups, rng)
    raise ValueError(f"unknown partition scheme {scheme!r}")
