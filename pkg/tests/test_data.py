import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprism.data import (
    DataBundle,
    IdxFormatError,
    LabeledDataset,
    Partition,
    SyntheticConfig,
    dirichlet_partition,
    generate_synthetic,
    largest_remainder,
    load_idx,
    pathological_partition,
)


def make_bundle(train_labels, test_labels, class_count):
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    return DataBundle(
        LabeledDataset(np.zeros((len(train_labels), 1)), train_labels, class_count),
        LabeledDataset(np.zeros((len(test_labels), 1)), test_labels, class_count),
    )


def balanced_bundle(classes, per_class_train, per_class_test):
    train = np.repeat(np.arange(classes), per_class_train)
    test = np.repeat(np.arange(classes), per_class_test)
    return make_bundle(train, test, classes)


def label_entropy(labels, classes):
    counts = np.bincount(labels, minlength=classes).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def mean_client_entropy(bundle, partition):
    classes = bundle.class_count
    return float(
        np.mean(
            [label_entropy(bundle.train.labels[ix], classes) for ix in partition.client_train]
        )
    )


class TestLargestRemainder:
    def test_exact_sum_and_proportionality(self):
        counts = largest_remainder(np.array([1.0, 1.0, 2.0]), 100)
        assert counts.sum() == 100
        np.testing.assert_array_equal(counts, [25, 25, 50])

    def test_tie_goes_to_lowest_index(self):
        np.testing.assert_array_equal(largest_remainder(np.array([1.0, 1.0]), 3), [2, 1])

    @given(
        st.lists(st.floats(0.0, 10.0), min_size=1, max_size=20),
        st.integers(0, 500),
    )
    def test_sum_preserved(self, weights, total):
        counts = largest_remainder(np.array(weights), total)
        if sum(weights) > 0:
            assert counts.sum() == total
        assert np.all(counts >= 0)


class TestDirichletPartition:
    def test_high_concentration_is_near_uniform(self):
        bundle = balanced_bundle(10, 200, 40)
        part = dirichlet_partition(bundle, 10, 1e6, seed=0)
        for ix in part.client_train:
            counts = np.bincount(bundle.train.labels[ix], minlength=10)
            assert counts.max() / counts.sum() < 0.15

    def test_lower_alpha_means_lower_entropy(self):
        bundle = balanced_bundle(10, 600, 100)
        skewed = dirichlet_partition(bundle, 100, 0.1, seed=3)
        mild = dirichlet_partition(bundle, 100, 0.5, seed=3)
        assert mean_client_entropy(bundle, skewed) < mean_client_entropy(bundle, mild)

    def test_union_covers_all_training_indices(self):
        bundle = balanced_bundle(5, 100, 20)
        part = dirichlet_partition(bundle, 7, 0.3, seed=1)
        joined = np.sort(np.concatenate(part.client_train))
        np.testing.assert_array_equal(joined, np.arange(len(bundle.train)))

    def test_test_split_mirrors_training_skew(self):
        bundle = balanced_bundle(5, 1000, 1000)
        part = dirichlet_partition(bundle, 10, 0.3, seed=5)
        for trn, tst in zip(part.client_train, part.client_test):
            if len(tst) < 50:
                continue
            p_train = np.bincount(bundle.train.labels[trn], minlength=5) / len(trn)
            p_test = np.bincount(bundle.test.labels[tst], minlength=5) / len(tst)
            assert np.abs(p_train - p_test).sum() < 0.15

    def test_every_client_nonempty_even_when_starved(self):
        # 40 clients over 60 samples at extreme skew forces redraws
        bundle = balanced_bundle(3, 20, 5)
        part = dirichlet_partition(bundle, 40, 0.05, seed=2)
        assert all(len(ix) >= 1 for ix in part.client_train)

    def test_rejects_nonpositive_alpha(self):
        with pytest.raises(ValueError, match="alpha"):
            dirichlet_partition(balanced_bundle(3, 10, 5), 2, 0.0, seed=0)

    def test_same_seed_same_partition(self):
        bundle = balanced_bundle(4, 50, 10)
        a = dirichlet_partition(bundle, 5, 0.4, seed=9)
        b = dirichlet_partition(bundle, 5, 0.4, seed=9)
        for x, y in zip(a.client_train, b.client_train):
            np.testing.assert_array_equal(x, y)
        for x, y in zip(a.client_test, b.client_test):
            np.testing.assert_array_equal(x, y)


class TestPathologicalPartition:
    def test_label_support_bounded(self):
        bundle = balanced_bundle(10, 1000, 100)  # 10k training samples
        part = pathological_partition(bundle, 100, 2, seed=0)
        for ix in part.client_train:
            assert len(np.unique(bundle.train.labels[ix])) <= 4

    def test_single_client_takes_everything(self):
        bundle = balanced_bundle(10, 100, 10)
        part = pathological_partition(bundle, 1, 10, seed=4)
        assert len(part.client_train[0]) == len(bundle.train)

    def test_indivisible_pool_rejected(self):
        bundle = balanced_bundle(10, 100, 10)  # 1000 samples, 7*3=21 shards
        with pytest.raises(ValueError, match="divide evenly"):
            pathological_partition(bundle, 7, 3, seed=0)

    def test_same_seed_same_partition(self):
        bundle = balanced_bundle(5, 100, 20)
        a = pathological_partition(bundle, 10, 2, seed=8)
        b = pathological_partition(bundle, 10, 2, seed=8)
        for x, y in zip(a.client_train, b.client_train):
            np.testing.assert_array_equal(x, y)

    def test_test_split_follows_class_support(self):
        bundle = balanced_bundle(5, 100, 100)
        part = pathological_partition(bundle, 5, 1, seed=1)
        for trn, tst in zip(part.client_train, part.client_test):
            train_classes = set(np.unique(bundle.train.labels[trn]))
            test_classes = set(np.unique(bundle.test.labels[tst]))
            assert test_classes <= train_classes


@st.composite
def partition_cases(draw):
    classes = draw(st.integers(2, 6))
    n_clients = draw(st.integers(1, 8))
    shards_per_client = draw(st.integers(1, 3))
    shard_size = draw(st.integers(2, 6))
    # per-class count >= shard size keeps any shard inside two class blocks
    n_train = n_clients * shards_per_client * shard_size
    per_class = max(shard_size, -(-n_train // classes))
    labels = np.repeat(np.arange(classes), per_class)[:n_train]
    # pad with the last class if the truncation lost samples
    if len(labels) < n_train:
        labels = np.concatenate([labels, np.full(n_train - len(labels), classes - 1)])
    rng = np.random.default_rng(draw(st.integers(0, 1000)))
    rng.shuffle(labels)
    test_labels = rng.integers(0, classes, size=draw(st.integers(classes, 60)))
    seed = draw(st.integers(0, 2**31 - 1))
    return classes, n_clients, shards_per_client, labels, test_labels, seed


def assert_partition_well_formed(part: Partition, n_train: int, n_test: int):
    for kind, sets, limit in (
        ("train", part.client_train, n_train),
        ("test", part.client_test, n_test),
    ):
        joined = np.concatenate(sets)
        assert len(np.unique(joined)) == len(joined), f"{kind} sets overlap"
        if len(joined):
            assert joined.min() >= 0 and joined.max() < limit
    assert all(len(ix) >= 1 for ix in part.client_train)


@settings(max_examples=60)
@given(partition_cases())
def test_pathological_partition_properties(case):
    classes, n_clients, shards_per_client, labels, test_labels, seed = case
    bundle = make_bundle(labels, test_labels, classes)
    part = pathological_partition(bundle, n_clients, shards_per_client, seed)
    assert_partition_well_formed(part, len(labels), len(test_labels))
    # sorted contiguous shards with per-class counts >= shard size
    for ix in part.client_train:
        assert len(np.unique(bundle.train.labels[ix])) <= 2 * shards_per_client


@settings(max_examples=60)
@given(
    st.integers(2, 6),
    st.integers(1, 10),
    st.floats(0.05, 5.0),
    st.integers(20, 200),
    st.integers(0, 2**31 - 1),
)
def test_dirichlet_partition_properties(classes, n_clients, alpha, n_train, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n_train)
    test_labels = rng.integers(0, classes, max(classes, n_train // 4))
    bundle = make_bundle(labels, test_labels, classes)
    part = dirichlet_partition(bundle, n_clients, alpha, seed)
    assert_partition_well_formed(part, n_train, len(test_labels))
    joined = np.sort(np.concatenate(part.client_train))
    np.testing.assert_array_equal(joined, np.arange(n_train))


def test_dirichlet_entropy_monotone_in_alpha():
    alphas = [0.1, 0.3, 0.5, 5.0]
    bundle = balanced_bundle(10, 400, 50)
    means = []
    for alpha in alphas:
        entropies = [
            mean_client_entropy(bundle, dirichlet_partition(bundle, 100, alpha, seed))
            for seed in range(5)
        ]
        means.append(float(np.mean(entropies)))
    assert all(means[i] <= means[i + 1] for i in range(len(means) - 1))


class TestGenerateSynthetic:
    def test_near_zero_noise_is_separable_by_nearest_mean(self):
        config = SyntheticConfig(cluster_noise=1e-6, seed=7)
        bundle, _, _ = generate_synthetic(config)
        classes = bundle.class_count
        means = np.stack(
            [bundle.train.inputs[bundle.train.labels == c].mean(axis=0) for c in range(classes)]
        )
        dists = ((bundle.test.inputs[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        preds = dists.argmin(axis=1)
        assert np.mean(preds == bundle.test.labels) == 1.0

    def test_class_count_and_client_support(self):
        config = SyntheticConfig(latent_clusters=3, classes_per_cluster=2, seed=0)
        bundle, truth, part = generate_synthetic(config)
        assert bundle.class_count == 6
        for client, ix in enumerate(part.client_train):
            support = np.unique(bundle.train.labels[ix])
            assert len(support) == 2
            assert set(support) == {truth[client] * 2, truth[client] * 2 + 1}

    def test_round_robin_ground_truth(self):
        config = SyntheticConfig(latent_clusters=3, n_clients=7, seed=1)
        _, truth, _ = generate_synthetic(config)
        np.testing.assert_array_equal(truth, [0, 1, 2, 0, 1, 2, 0])

    def test_deterministic(self):
        config = SyntheticConfig(seed=11)
        a, _, _ = generate_synthetic(config)
        b, _, _ = generate_synthetic(config)
        np.testing.assert_array_equal(a.train.inputs, b.train.inputs)
        np.testing.assert_array_equal(a.test.labels, b.test.labels)

    def test_requires_concrete_seed(self):
        with pytest.raises(ValueError, match="seed"):
            generate_synthetic(SyntheticConfig(seed=None))


def write_idx_pair(tmp_path, pixels, labels, image_magic=0x803, label_magic=0x801,
                   label_count=None):
    """1x1-pixel IDX fixture with byte-level control, built by the test."""
    images = tmp_path / "images-idx3-ubyte"
    labels_file = tmp_path / "labels-idx1-ubyte"
    images.write_bytes(
        struct.pack(">IIII", image_magic, len(pixels), 1, 1) + bytes(pixels)
    )
    count = len(labels) if label_count is None else label_count
    labels_file.write_bytes(struct.pack(">II", label_magic, count) + bytes(labels))
    return images, labels_file


class TestLoadIdx:
    def test_two_pixel_fixture(self, tmp_path):
        images, labels = write_idx_pair(tmp_path, [200, 15], [1, 0])
        ds = load_idx(images, labels)
        np.testing.assert_allclose(ds.inputs, [[200 / 255], [15 / 255]])
        np.testing.assert_array_equal(ds.labels, [1, 0])
        assert ds.class_count == 2

    def test_count_mismatch(self, tmp_path):
        images, labels = write_idx_pair(tmp_path, [1, 2], [0, 1, 1])
        with pytest.raises(IdxFormatError, match="label count 3 != image count 2"):
            load_idx(images, labels)

    def test_truncated_file(self, tmp_path):
        images, labels = write_idx_pair(tmp_path, [1, 2], [0, 1])
        images.write_bytes(images.read_bytes()[:10])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(images, labels)

    def test_empty_file(self, tmp_path):
        images, labels = write_idx_pair(tmp_path, [1], [0])
        images.write_bytes(b"")
        with pytest.raises(IdxFormatError, match="byte 0"):
            load_idx(images, labels)

    def test_bad_magic_names_file(self, tmp_path):
        images, labels = write_idx_pair(tmp_path, [1], [0], image_magic=0x701)
        with pytest.raises(IdxFormatError, match="bad magic"):
            load_idx(images, labels)

    def test_label_count_lies_about_payload(self, tmp_path):
        images, labels = write_idx_pair(tmp_path, [1, 2], [0], label_count=2)
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(images, labels)
