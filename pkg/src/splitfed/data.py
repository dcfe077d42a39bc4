"""Datasets, client partitions and minibatch streams.

Partitions assign sample indices to clients; client weights are the
dataset-size fractions used by weighted aggregation. All sampling is
keyed through :mod:`splitfed.seeds`, so identical seeds replay exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import seeds

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# Class center directions are a fixed property of (num_classes, dim), not of
# the per-dataset noise seed, so the class geometry is stable across seeds.
_DIRECTIONS_SEED = 90843


class IdxFormatError(Exception):
    pass


class PartitionError(Exception):
    pass


@dataclass
class Dataset:
    features: np.ndarray     # (N, ...) float64
    labels: np.ndarray       # (N,) int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.features):
            raise ValueError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if len(self.labels) == 0:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]


@dataclass
class Partition:
    assignments: list[np.ndarray]          # per-client sample indices
    sizes: np.ndarray = field(init=False)  # D_k
    weights: np.ndarray = field(init=False)  # alpha_k = D_k / sum D

    def __post_init__(self):
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]
        self.sizes = np.array([len(a) for a in self.assignments], dtype=np.int64)
        total = int(self.sizes.sum())
        if total == 0:
            raise PartitionError("partition covers no samples")
        self.weights = self.sizes / total

    @property
    def num_clients(self) -> int:
        return len(self.assignments)


def _class_directions(num_classes: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([_DIRECTIONS_SEED, num_classes, dim]))
    vecs = rng.standard_normal((num_classes, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def gen_synthetic(num_classes: int, dim: int, per_class: int, class_sep: float,
                  seed: int) -> Dataset:
    """Gaussian blobs: class c is a unit-covariance cloud centered at
    class_sep times a fixed unit direction."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"need at least 1 sample per class, got {per_class}")
    centers = class_sep * _class_directions(num_classes, dim)
    rng = seeds.rng_for(seed, seeds.SYNTH)
    features = np.concatenate([
        centers[c] + rng.standard_normal((per_class, dim)) for c in range(num_classes)
    ])
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(features, labels, num_classes)


def _read_idx_header(data: bytes, path, expected_magic: int, dims: int):
    header_len = 4 * (1 + dims)
    if len(data) < header_len:
        raise IdxFormatError(f"{path}: truncated header")
    fields = struct.unpack(f">{1 + dims}I", data[:header_len])
    if fields[0] != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}"
        )
    return fields[1:], data[header_len:]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair, pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        img_data = f.read()
    with open(labels_path, "rb") as f:
        lab_data = f.read()

    (n_img, rows, cols), img_payload = _read_idx_header(
        img_data, images_path, IDX_IMAGE_MAGIC, 3)
    (n_lab,), lab_payload = _read_idx_header(lab_data, labels_path, IDX_LABEL_MAGIC, 1)

    if n_img != n_lab:
        raise IdxFormatError(
            f"count mismatch: {images_path} has {n_img} images, "
            f"{labels_path} has {n_lab} labels"
        )
    expected = n_img * rows * cols
    if len(img_payload) < expected:
        raise IdxFormatError(
            f"{images_path}: truncated payload ({len(img_payload)} bytes, "
            f"expected {expected})"
        )
    if len(lab_payload) < n_lab:
        raise IdxFormatError(
            f"{labels_path}: truncated payload ({len(lab_payload)} bytes, "
            f"expected {n_lab})"
        )
    pixels = np.frombuffer(img_payload[:expected], dtype=np.uint8)
    features = (pixels.astype(np.float64) / 255.0).reshape(n_img, 1, rows, cols)
    labels = np.frombuffer(lab_payload[:n_lab], dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(features, labels, num_classes)


def partition_iid(ds: Dataset, num_clients: int, seed: int) -> Partition:
    """Random permutation split into near-equal chunks (sizes differ by <= 1)."""
    n = len(ds)
    if n < num_clients:
        raise PartitionError(f"cannot split {n} samples across {num_clients} clients")
    perm = seeds.rng_for(seed, seeds.PARTITION).permutation(n)
    return Partition(list(np.array_split(perm, num_clients)))


def partition_dirichlet(ds: Dataset, num_clients: int, mu: float, seed: int,
                        min_samples: int = 1, max_retries: int = 100) -> Partition:
    """Label-skewed partition: each class is spread over clients with
    class-specific Dirichlet(mu) proportions. The whole partition is
    redrawn until every client holds at least ``min_samples``."""
    if mu <= 0:
        raise ValueError(f"dirichlet concentration must be > 0, got {mu}")
    if len(ds) < num_clients * min_samples:
        raise PartitionError(
            f"{len(ds)} samples cannot give {num_clients} clients "
            f">= {min_samples} samples each"
        )
    rng = seeds.rng_for(seed, seeds.PARTITION)
    class_indices = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for _ in range(max_retries):
        buckets = [[] for _ in range(num_clients)]
        for idx_c in class_indices:
            if len(idx_c) == 0:
                continue
            shuffled = rng.permutation(idx_c)
            props = rng.dirichlet(np.full(num_clients, mu))
            counts = rng.multinomial(len(idx_c), props)
            offset = 0
            for k, cnt in enumerate(counts):
                buckets[k].append(shuffled[offset:offset + cnt])
                offset += cnt
        assignments = [
            np.concatenate(b) if b else np.zeros(0, dtype=np.int64) for b in buckets
        ]
        if all(len(a) >= min_samples for a in assignments):
            return Partition(assignments)
    raise PartitionError(
        f"no partition with >= {min_samples} samples per client found in "
        f"{max_retries} draws (num_clients={num_clients}, mu={mu})"
    )


def _chunk(indices: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]


def minibatch_stream(partition: Partition, client_id: int, batch_size: int,
                     epoch_seed) -> list[np.ndarray]:
    """One epoch of batches for a client: a seeded shuffle of its indices
    chunked into ceil(D_k / B) batches, the last possibly short."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    indices = partition.assignments[client_id]
    rng = np.random.default_rng(np.random.SeedSequence(epoch_seed))
    return _chunk(rng.permutation(indices), batch_size)


def round_batches(partition: Partition, client_id: int, batch_size: int,
                  master_seed: int, round_index: int, epochs: int) -> list[np.ndarray]:
    """All batches a client consumes in one round: ``epochs`` consecutive
    epoch streams, each keyed by (master seed, client, round, epoch)."""
    out = []
    for e in range(epochs):
        out.extend(minibatch_stream(
            partition, client_id, batch_size,
            [master_seed, seeds.BATCH, client_id, round_index, e]))
    return out


def pooled_round_batches(n_samples: int, batch_size: int, master_seed: int,
                         round_index: int, epochs: int) -> list[np.ndarray]:
    """Round batches over the pooled dataset (centralized training)."""
    out = []
    for e in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence(
            [master_seed, seeds.CENTRAL_BATCH, round_index, e]))
        out.extend(_chunk(rng.permutation(n_samples), batch_size))
    return out
