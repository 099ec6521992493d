"""Datasets, the IDX loader and non-IID partitioners."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import as_generator

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.class_count)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.y == c)


@dataclass
class Partition:
    """Per-client index lists into one dataset."""

    indices: list[np.ndarray]
    warnings: list[str] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    def shard(self, ds: Dataset, n: int) -> Dataset:
        return ds.subset(self.indices[n])

    def client_classes(self, ds: Dataset) -> list[list[int]]:
        return [sorted({int(c) for c in ds.y[idx]}) for idx in self.indices]

    def histogram(self, ds: Dataset) -> np.ndarray:
        h = np.zeros((self.num_clients, ds.class_count), dtype=np.int64)
        for n, idx in enumerate(self.indices):
            np.add.at(h[n], ds.y[idx], 1)
        return h

    def to_json(self) -> str:
        return json.dumps({"clients": [[int(i) for i in idx] for idx in self.indices],
                           "warnings": self.warnings})

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        d = json.loads(text)
        return cls([np.asarray(c, dtype=np.int64) for c in d["clients"]], d.get("warnings", []))


def synth_gaussian(C: int, n_per_class: int, shape=(2,), separation: float = 3.0, rng=0,
                   noise: float = 1.0, jitter: int = 0) -> Dataset:
    """Class ``c`` samples are ``separation * mu_c + noise * N(0, I)``.

    ``mu_c`` is a seeded random prototype with unit RMS. For image shapes
    ``(channels, H, W)`` the prototypes are smoothed random textures and ``jitter``
    rolls each sample by up to that many pixels in both directions.
    """
    if C < 2:
        raise DataError("need at least two classes")
    gen = as_generator(rng)
    shape = tuple(shape)
    protos = gen.normal(size=(C,) + shape)
    if len(shape) == 3:
        # 3x3 box blur (wrapping) gives the textures spatial structure for convolutions
        sm = np.zeros_like(protos)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                sm += np.roll(protos, (di, dj), axis=(2, 3))
        protos = sm
    axes = tuple(range(1, protos.ndim))
    protos /= np.sqrt((protos ** 2).mean(axis=axes, keepdims=True))
    y = np.repeat(np.arange(C), n_per_class)
    x = separation * protos[y] + noise * gen.normal(size=(len(y),) + shape)
    if jitter and len(shape) == 3:
        shifts = gen.integers(-jitter, jitter + 1, size=(len(y), 2))
        for s in range(len(y)):
            x[s] = np.roll(x[s], tuple(shifts[s]), axis=(1, 2))
    return Dataset(x, y, C)


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{path}: bad magic number 0x{raw[:4].hex()} (expected unsigned-byte IDX)")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims)) if dims else 0
    if len(raw) - head != n:
        raise DataError(f"{path}: expected {n} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled to [0, 1], shape ``[n, 1, H, W]``."""
    imgs = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if imgs.ndim != 3:
        raise DataError(f"{images_path}: expected 3 dimensions, got {imgs.ndim}")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: expected 1 dimension, got {labels.ndim}")
    if len(labels) != len(imgs):
        raise DataError(f"{len(imgs)} images but {len(labels)} labels")
    if len(labels) and labels.max() >= class_count:
        raise DataError(f"label {int(labels.max())} outside [0, {class_count})")
    x = imgs.astype(np.float64)[:, None] / 255.0
    return Dataset(x, labels.astype(np.int64), class_count)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def partition_nxc(ds: Dataset, N: int, C_local: int, rng=0) -> Partition:
    """Each client holds ``C_local`` distinct classes, dealt round-robin by load.

    Clients pick in turn; client ``n`` takes the ``C_local`` classes with the fewest
    holders so far, ties broken at random. Holder counts therefore never differ by
    more than one, so every class ends with floor or ceil of ``N * C_local / C``
    holders, while class sets mix freely across clients. Each class's samples are
    split evenly (±1) among its holders.
    """
    C = ds.class_count
    if not 1 <= C_local <= C:
        raise DataError(f"C_local={C_local} must be in [1, {C}]")
    gen = as_generator(rng)
    holders: list[list[int]] = [[] for _ in range(C)]
    for n in range(N):
        load = np.array([len(h) for h in holders])
        pick = np.lexsort((gen.random(C), load))[:C_local]
        for c in pick:
            holders[int(c)].append(n)
    parts: list[list[np.ndarray]] = [[] for _ in range(N)]
    warnings = []
    for c in range(C):
        idx = gen.permutation(ds.class_indices(c))
        if not holders[c]:
            warnings.append(f"class {c} is held by no client")
            log.warning(warnings[-1])
            continue
        for n, chunk in zip(holders[c], np.array_split(idx, len(holders[c]))):
            parts[n].append(chunk)
    return Partition([np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts],
                     warnings)


def largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that round ``p * total`` by largest remainder."""
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    rem = total - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def partition_dirichlet(ds: Dataset, N: int, alpha: float, rng=0) -> Partition:
    """Per class, draw client proportions from Dir(alpha) and deal that class's samples."""
    if alpha <= 0:
        raise DataError("alpha must be positive")
    gen = as_generator(rng)
    parts: list[list[np.ndarray]] = [[] for _ in range(N)]
    for c in range(ds.class_count):
        idx = gen.permutation(ds.class_indices(c))
        p = gen.dirichlet(np.full(N, float(alpha)))
        counts = largest_remainder(p, len(idx))
        start = 0
        for n in range(N):
            parts[n].append(idx[start:start + counts[n]])
            start += counts[n]
    return Partition([np.sort(np.concatenate(p)) for p in parts])


def make_probe(ds: Dataset, batches: int = 4, batch_size: int = 32, rng=0) -> dict[int, list[np.ndarray]]:
    """``batches`` equally sized batches per class, drawn with a fixed seed."""
    gen = as_generator(rng)
    probe = {}
    for c in range(ds.class_count):
        idx = ds.class_indices(c)
        if len(idx) == 0:
            continue
        need = batches * batch_size
        pick = gen.choice(idx, size=need, replace=need > len(idx))
        probe[c] = [ds.x[pick[b * batch_size:(b + 1) * batch_size]] for b in range(batches)]
    return probe


def split_train_test(ds: Dataset, test_per_class: int, rng=0) -> tuple[Dataset, Dataset]:
    gen = as_generator(rng)
    test = []
    for c in range(ds.class_count):
        idx = gen.permutation(ds.class_indices(c))
        test.append(idx[:test_per_class])
    test_idx = np.sort(np.concatenate(test))
    train_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    return ds.subset(train_idx), ds.subset(test_idx)
