"""Datasets and non-IID partitioners.

Provides a synthetic clustered-classification generator with known
client-to-group structure (so cluster-recovery tests have ground truth), an
IDX image/label reader for FMNIST-style files, and the Dirichlet and
pathological label-skew partitioners. Partitions always carry matched
per-client train and test index sets: the realized skew of a client's
training split is mirrored in its test split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .seeding import derive_seed

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Distance scale of synthetic class means relative to unit noise; 3.0 leaves
# blobs learnable but not trivially so at the default noise level.
MEAN_SCALE = 3.0

PARTITION_SCHEMES = ("synthetic", "dirichlet", "pathological")


class IdxFormatError(IOError):
    """IDX container violation, tagged with the offending file and byte offset."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


@dataclass
class LabeledDataset:
    """Flat feature matrix plus integer labels in [0, class_count)."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"inputs must be a nonempty matrix, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.inputs.shape[0]} rows"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(
                f"labels must lie in [0, {self.class_count}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class DataBundle:
    """A dataset's official train/test pools, partitioned separately."""

    train: LabeledDataset
    test: LabeledDataset

    def __post_init__(self):
        if self.train.inputs.shape[1] != self.test.inputs.shape[1]:
            raise ValueError("train and test input widths differ")
        if self.train.class_count != self.test.class_count:
            raise ValueError("train and test class counts differ")

    @property
    def class_count(self) -> int:
        return self.train.class_count


@dataclass
class Partition:
    """Per-client index sets: client_train into the train pool, client_test
    into the test pool. Index sets of the same kind are pairwise disjoint and
    every client has at least one training sample."""

    client_train: list[np.ndarray]
    client_test: list[np.ndarray]
    scheme: str
    seed: int

    def __post_init__(self):
        self.client_train = [np.asarray(ix, dtype=np.int64) for ix in self.client_train]
        self.client_test = [np.asarray(ix, dtype=np.int64) for ix in self.client_test]
        if len(self.client_train) != len(self.client_test):
            raise ValueError("client_train and client_test lengths differ")
        if any(len(ix) == 0 for ix in self.client_train):
            raise ValueError("every client needs a nonempty training split")
        for kind, sets in (("train", self.client_train), ("test", self.client_test)):
            joined = np.concatenate(sets) if sets else np.empty(0, dtype=np.int64)
            if len(np.unique(joined)) != len(joined):
                raise ValueError(f"client {kind} index sets overlap")

    @property
    def n_clients(self) -> int:
        return len(self.client_train)


@dataclass(frozen=True)
class SyntheticConfig:
    """Gaussian-blob classification with latent client groups.

    Classes are split into disjoint blocks, one block per latent group;
    clients are assigned to groups round-robin and sample only their group's
    classes. `seed = None` means "derive from the experiment master seed".
    """

    latent_clusters: int = 3
    classes_per_cluster: int = 2
    input_dim: int = 16
    n_clients: int = 30
    samples_per_client: int = 60
    test_samples_per_client: int = 40
    cluster_noise: float = 0.5
    seed: int | None = 0

    def __post_init__(self):
        if self.latent_clusters < 2:
            raise ValueError("latent_clusters must be >= 2")
        for field_name in (
            "classes_per_cluster",
            "input_dim",
            "n_clients",
            "samples_per_client",
            "test_samples_per_client",
        ):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be >= 1")
        if self.cluster_noise <= 0:
            raise ValueError("cluster_noise must be positive")

    @property
    def class_count(self) -> int:
        return self.latent_clusters * self.classes_per_cluster


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Apportion `total` items proportionally to nonnegative weights.

    Exact-sum and deterministic: floor the ideal quotas, then hand out the
    remaining items by largest fractional part, ties to the lowest index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or len(weights) == 0:
        raise ValueError("weights must be a nonempty 1-D array")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    counts = np.zeros(len(weights), dtype=np.int64)
    if total <= 0 or weights.sum() <= 0:
        return counts
    quotas = weights / weights.sum() * total
    counts = np.floor(quotas).astype(np.int64)
    short = int(total - counts.sum())
    if short > 0:
        frac = quotas - counts
        order = np.lexsort((np.arange(len(weights)), -frac))
        counts[order[:short]] += 1
    return counts


def _class_pools(labels: np.ndarray, class_count: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(labels == c)) for c in range(class_count)]


def _apportion_pools(pools: list[np.ndarray], shares: np.ndarray) -> list[np.ndarray]:
    """Split each class pool across clients by that class's column of shares."""
    n_clients = shares.shape[0]
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c, pool in enumerate(pools):
        counts = largest_remainder(shares[:, c], len(pool))
        start = 0
        for i, count in enumerate(counts):
            if count > 0:
                parts[i].append(pool[start : start + count])
            start += count
    return [
        np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        for chunks in parts
    ]


def dirichlet_partition(
    bundle: DataBundle, n_clients: int, alpha_dir: float, seed: int, max_redraws: int = 100
) -> Partition:
    """Label-skew split: each client's class mix is drawn from Dir(alpha_dir * 1).

    The drawn per-client proportions drive both pools: every class's train
    samples are apportioned across clients by the clients' probability of
    that class (largest-remainder rounding), and the test pool is apportioned
    with the same draw so local test splits match local training skew.
    Clients that end up with no training data get their proportions re-drawn
    from a derived sub-seed.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if alpha_dir <= 0:
        raise ValueError(f"alpha_dir must be positive, got {alpha_dir}")
    rng = np.random.default_rng(seed)
    class_count = bundle.class_count
    props = rng.dirichlet(np.full(class_count, alpha_dir), size=n_clients)
    train_pools = _class_pools(bundle.train.labels, class_count, rng)
    test_pools = _class_pools(bundle.test.labels, class_count, rng)

    for attempt in range(max_redraws + 1):
        client_train = _apportion_pools(train_pools, props)
        empty = [i for i, ix in enumerate(client_train) if len(ix) == 0]
        if not empty:
            break
        for i in empty:
            sub = np.random.default_rng(derive_seed(seed, attempt, i))
            props[i] = sub.dirichlet(np.full(class_count, alpha_dir))
    else:
        raise RuntimeError(
            f"could not give every client a training sample after {max_redraws} redraws"
        )

    client_test = _apportion_pools(test_pools, props)
    return Partition(client_train, client_test, scheme=f"dirichlet(alpha={alpha_dir})", seed=seed)


def pathological_partition(
    bundle: DataBundle, n_clients: int, shards_per_client: int, seed: int
) -> Partition:
    """Classic shard split: sort by label, cut into equal contiguous shards,
    deal shards_per_client shards to each client by seeded permutation.

    Each client sees at most shards_per_client distinct labels when shards
    align with class boundaries, at most twice that when they straddle them.
    The test pool is apportioned per class proportionally to the clients'
    realized training class histograms.
    """
    if n_clients < 1 or shards_per_client < 1:
        raise ValueError("n_clients and shards_per_client must be >= 1")
    n_shards = n_clients * shards_per_client
    n_train = len(bundle.train)
    if n_train % n_shards != 0:
        raise ValueError(
            f"{n_train} training samples do not divide evenly into "
            f"{n_shards} shards ({n_clients} clients x {shards_per_client} shards)"
        )
    shard_size = n_train // n_shards
    order = np.argsort(bundle.train.labels, kind="stable")
    shards = order.reshape(n_shards, shard_size)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_shards)
    client_train = [
        np.sort(shards[perm[i * shards_per_client : (i + 1) * shards_per_client]].ravel())
        for i in range(n_clients)
    ]

    class_count = bundle.class_count
    hist = np.zeros((n_clients, class_count), dtype=np.float64)
    for i, ix in enumerate(client_train):
        hist[i] = np.bincount(bundle.train.labels[ix], minlength=class_count)
    test_pools = _class_pools(bundle.test.labels, class_count, rng)
    client_test = _apportion_pools(test_pools, hist)
    return Partition(
        client_train,
        client_test,
        scheme=f"pathological(shards={shards_per_client})",
        seed=seed,
    )


def _balanced_labels(
    classes: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """`count` labels spread as evenly as possible over `classes`, shuffled."""
    per_class = largest_remainder(np.ones(len(classes)), count)
    labels = np.repeat(classes, per_class)
    rng.shuffle(labels)
    return labels


def generate_synthetic(
    config: SyntheticConfig,
) -> tuple[DataBundle, np.ndarray, Partition]:
    """Build the clustered blob dataset plus its natural client partition.

    Class means are drawn from a scaled standard normal; samples add
    isotropic noise. Client i belongs to latent group i mod latent_clusters
    and draws near-balanced labels from that group's class block, so each
    client's label support is exactly its group's classes. Returns the data,
    the ground-truth client-to-group map, and the matching partition.
    """
    if config.seed is None:
        raise ValueError("SyntheticConfig.seed must be an integer to generate data")
    rng = np.random.default_rng(config.seed)
    class_count = config.class_count
    dim = config.input_dim
    means = rng.standard_normal((class_count, dim)) * MEAN_SCALE
    groups = np.arange(config.n_clients) % config.latent_clusters

    def sample_block(client: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        block = np.arange(
            groups[client] * config.classes_per_cluster,
            (groups[client] + 1) * config.classes_per_cluster,
        )
        labels = _balanced_labels(block, count, rng)
        inputs = means[labels] + rng.normal(0.0, config.cluster_noise, size=(count, dim))
        return inputs, labels

    train_x, train_y, test_x, test_y = [], [], [], []
    client_train, client_test = [], []
    train_at = test_at = 0
    for i in range(config.n_clients):
        x, y = sample_block(i, config.samples_per_client)
        train_x.append(x)
        train_y.append(y)
        client_train.append(np.arange(train_at, train_at + len(y)))
        train_at += len(y)
        x, y = sample_block(i, config.test_samples_per_client)
        test_x.append(x)
        test_y.append(y)
        client_test.append(np.arange(test_at, test_at + len(y)))
        test_at += len(y)

    name = f"synthetic{config.latent_clusters}x{config.classes_per_cluster}"
    bundle = DataBundle(
        LabeledDataset(np.concatenate(train_x), np.concatenate(train_y), class_count, name),
        LabeledDataset(np.concatenate(test_x), np.concatenate(test_y), class_count, name + "-test"),
    )
    partition = Partition(client_train, client_test, scheme="synthetic", seed=config.seed)
    return bundle, groups.copy(), partition


def _read_exact(f, count: int, path) -> bytes:
    at = f.tell()
    data = f.read(count)
    if len(data) != count:
        raise IdxFormatError(path, at, f"truncated: wanted {count} bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read a big-endian IDX image/label file pair, pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                images_path, 0, f"bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        pixels = np.frombuffer(_read_exact(f, count * rows * cols, images_path), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                labels_path, 0, f"bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(f, label_count, labels_path), dtype=np.uint8)
    if label_count != count:
        raise IdxFormatError(
            labels_path, 4, f"label count {label_count} != image count {count}"
        )
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(
        inputs, labels.astype(np.int64), int(labels.max()) + 1, Path(images_path).name
    )


def with_class_count(dataset: LabeledDataset, class_count: int) -> LabeledDataset:
    """Widen a dataset's label space (used to align separately loaded pools)."""
    if class_count < dataset.class_count:
        raise ValueError("cannot shrink class_count below observed labels")
    return replace(dataset, class_count=class_count)
