from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mnist_dir, requires_mnist
from fedincentive.datasets import (
    Dataset,
    IdxFormatError,
    dirichlet_partition,
    encode_idx_images,
    encode_idx_labels,
    generate_synthetic,
    largest_remainder,
    load_idx,
    parse_idx_images,
    parse_idx_labels,
    split_validation,
)

HEADER_1x2x2 = bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2])


# ---------------------------------------------------------------- IDX


def test_parse_hand_built_image():
    images = parse_idx_images(HEADER_1x2x2 + bytes([0, 128, 255, 7]))
    assert images.shape == (1, 2, 2)
    assert images.dtype == np.uint8
    assert images.tolist() == [[[0, 128], [255, 7]]]


def test_parse_empty_image_set():
    raw = struct.pack(">4I", 0x803, 0, 28, 28)
    assert parse_idx_images(raw).shape == (0, 28, 28)


def test_image_wrong_magic_names_observed_value():
    raw = struct.pack(">4I", 0x801, 1, 2, 2) + bytes(4)
    with pytest.raises(IdxFormatError, match="0x00000801"):
        parse_idx_images(raw)


def test_image_truncated_payload_reports_both_lengths():
    with pytest.raises(IdxFormatError, match=r"expected 4 bytes, got 3"):
        parse_idx_images(HEADER_1x2x2 + bytes(3))


def test_parse_labels():
    raw = struct.pack(">2I", 0x801, 3) + bytes([5, 0, 9])
    assert parse_idx_labels(raw).tolist() == [5, 0, 9]
    assert parse_idx_labels(struct.pack(">2I", 0x801, 0)).tolist() == []


def test_label_out_of_range_names_index_and_value():
    raw = struct.pack(">2I", 0x801, 3) + bytes([1, 2, 12])
    with pytest.raises(IdxFormatError, match=r"index 2 has value 12"):
        parse_idx_labels(raw)


def test_label_wrong_magic():
    with pytest.raises(IdxFormatError, match="0x00000803"):
        parse_idx_labels(struct.pack(">2I", 0x803, 0))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 5), st.integers(1, 6), st.integers(1, 6), st.randoms(use_true_random=False)
)
def test_idx_round_trip_is_byte_exact(count, rows, cols, rnd):
    payload = bytes(rnd.randrange(256) for _ in range(count * rows * cols))
    raw = struct.pack(">4I", 0x803, count, rows, cols) + payload
    assert encode_idx_images(parse_idx_images(raw)) == raw
    labels = bytes(rnd.randrange(10) for _ in range(count))
    raw_l = struct.pack(">2I", 0x801, count) + labels
    assert encode_idx_labels(parse_idx_labels(raw_l)) == raw_l


def test_load_idx_normalizes_and_reads_gzip(tmp_path):
    images = np.array([[[0, 255], [51, 102]], [[255, 255], [0, 0]]], dtype=np.uint8)
    (tmp_path / "img.gz").write_bytes(gzip.compress(encode_idx_images(images)))
    (tmp_path / "lab").write_bytes(encode_idx_labels(np.array([3, 7])))
    ds = load_idx(tmp_path / "img.gz", tmp_path / "lab")
    assert ds.features.shape == (2, 4)
    np.testing.assert_array_equal(ds.features[0], [0.0, 1.0, 0.2, 0.4])
    assert ds.labels.tolist() == [3, 7]
    assert len(load_idx(tmp_path / "img.gz", tmp_path / "lab", limit=1)) == 1


def test_load_idx_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(encode_idx_images(np.zeros((2, 1, 1), np.uint8)))
    (tmp_path / "lab").write_bytes(encode_idx_labels(np.array([1])))
    with pytest.raises(IdxFormatError, match="2 images but"):
        load_idx(tmp_path / "img", tmp_path / "lab")


@requires_mnist
def test_official_mnist_train_images():
    d = mnist_dir()
    raw = (d / "train-images-idx3-ubyte").read_bytes()
    images = parse_idx_images(raw)
    assert images.shape == (60000, 28, 28)
    # independent byte-level read of image 0
    assert int(images[0].sum(dtype=np.int64)) == sum(raw[16 : 16 + 784])


@requires_mnist
def test_official_mnist_train_label_histogram():
    raw = (mnist_dir() / "train-labels-idx1-ubyte").read_bytes()
    labels = parse_idx_labels(raw)
    counted = [0] * 10
    for b in raw[8:]:
        counted[b] += 1
    assert np.bincount(labels, minlength=10).tolist() == counted
    assert counted == [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]


# ---------------------------------------------------------------- Dataset


def test_dataset_rejects_bad_labels_and_nonfinite_features():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan], [0.0]]), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.array([0, 1]), 2)


# ---------------------------------------------------------------- synthetic


def test_synthetic_counts():
    ds = generate_synthetic(2, 10, 4, 5.0, seed=1)
    assert len(ds) == 20
    assert np.bincount(ds.labels).tolist() == [10, 10]
    assert ds.n_features == 4


def test_synthetic_is_deterministic():
    a = generate_synthetic(3, 7, 5, 2.0, seed=11)
    b = generate_synthetic(3, 7, 5, 2.0, seed=11)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Brute force: per-class means from ``train``, then nearest-mean labels on ``test``."""
    centroids = []
    for c in range(train.n_classes):
        rows = [train.features[i] for i in range(len(train)) if train.labels[i] == c]
        centroids.append(sum(rows) / len(rows))
    correct = 0
    for x, y in zip(test.features, test.labels):
        dists = [float(((x - m) ** 2).sum()) for m in centroids]
        correct += int(dists.index(min(dists)) == y)
    return correct / len(test)


def test_synthetic_is_separable_by_nearest_centroid():
    ds = generate_synthetic(4, 250, 16, 6.0, seed=7)
    assert nearest_centroid_accuracy(ds, ds) >= 0.95


def test_synthetic_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate_synthetic(0, 10, 4, 1.0, 0)
    with pytest.raises(ValueError):
        generate_synthetic(2, 10, 4, 0.0, 0)


# ---------------------------------------------------------------- partition


def _class_lists(sizes):
    out, start = [], 0
    for n in sizes:
        out.append(np.arange(start, start + n))
        start += n
    return out


def hamilton_counts(shares, total):
    """Independent largest-remainder: pure Python, sort by (-fraction, position)."""
    exact = [s * total for s in shares]
    floors = [int(e // 1) for e in exact]
    order = sorted(range(len(shares)), key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[: total - sum(floors)]:
        floors[i] += 1
    return floors


def check_partition(part, n_total, n_clients):
    assert len(part) == n_clients
    flat = np.concatenate(part.client_indices)
    assert len(flat) == n_total
    assert len(np.unique(flat)) == n_total
    assert set(flat.tolist()) == set(range(n_total))
    assert all(len(c) > 0 for c in part.client_indices)


def test_largest_remainder_examples():
    assert largest_remainder(np.array([0.5, 0.5]), 3).tolist() == [2, 1]
    assert largest_remainder(np.array([0.2, 0.3, 0.5]), 10).tolist() == [2, 3, 5]
    assert largest_remainder(np.array([1 / 3] * 3), 100).sum() == 100


def test_near_iid_limit():
    part = dirichlet_partition(_class_lists([100, 100]), 4, alpha=1e6, seed=5)
    for idx in part.client_indices:
        per_class = np.bincount(idx >= 100, minlength=2)
        assert all(23 <= k <= 27 for k in per_class)


def test_single_client_gets_everything():
    part = dirichlet_partition(_class_lists([7, 5, 3]), 1, alpha=0.5, seed=0)
    assert part.client_indices[0].tolist() == list(range(15))


def test_allocation_matches_independent_largest_remainder():
    sizes = [100 + 7 * c for c in range(10)]
    classes = _class_lists(sizes)
    part = dirichlet_partition(classes, 20, alpha=0.5, seed=42)
    # Replay the documented draw order: one dirichlet call first.
    props = np.random.default_rng(42).dirichlet([0.5] * 20, size=10)
    expected = np.array([hamilton_counts(list(props[c]), sizes[c]) for c in range(10)])
    assert (expected.sum(axis=0) > 0).all(), "fixture must not need the empty-client repair"
    label_of = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    observed = np.array(
        [np.bincount(label_of[idx], minlength=10) for idx in part.client_indices]
    ).T
    np.testing.assert_array_equal(observed, expected)
    np.testing.assert_array_equal(observed.sum(axis=1), sizes)


def test_empty_client_repair_takes_lowest_index_of_largest_client():
    classes = _class_lists([12])
    raw_props = np.random.default_rng(9).dirichlet([0.02] * 4, size=1)[0]
    raw = hamilton_counts(list(raw_props), 12)
    assert 0 in raw, "seed chosen so the raw allocation leaves a client empty"
    part = dirichlet_partition(classes, 4, alpha=0.02, seed=9)
    check_partition(part, 12, 4)
    empties = [i for i, k in enumerate(raw) if k == 0]
    for cid in empties:
        assert len(part.client_indices[cid]) == 1
    donor = int(np.argmax(raw))
    donated = sorted(int(part.client_indices[c][0]) for c in empties)
    remaining = part.client_indices[donor].tolist()
    assert all(d < min(remaining) for d in donated)


def test_partition_rejects_bad_arguments():
    with pytest.raises(ValueError):
        dirichlet_partition(_class_lists([4]), 0, 0.5, 0)
    with pytest.raises(ValueError):
        dirichlet_partition(_class_lists([4]), 2, 0.0, 0)
    with pytest.raises(ValueError):
        dirichlet_partition(_class_lists([2]), 3, 0.5, 0)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.05, 50.0),
    st.integers(0, 2**32 - 1),
    st.integers(1, 15),
    st.lists(st.integers(0, 40), min_size=1, max_size=6),
)
def test_partition_invariants(alpha, seed, n_clients, sizes):
    if sum(sizes) < n_clients:
        sizes = sizes + [n_clients]
    classes = _class_lists(sizes)
    part = dirichlet_partition(classes, n_clients, alpha, seed)
    check_partition(part, sum(sizes), n_clients)
    again = dirichlet_partition(classes, n_clients, alpha, seed)
    assert all(np.array_equal(a, b) for a, b in zip(part.client_indices, again.client_indices))


# ---------------------------------------------------------------- validation split


def _indexed(n):
    return Dataset(np.arange(n, dtype=np.float64)[:, None], np.zeros(n, dtype=np.int64), 1)


def test_split_sizes_at_full_scale():
    val, rest = split_validation(_indexed(60000), 200, seed=0)
    assert (len(val), len(rest)) == (200, 59800)


def test_split_boundary():
    val, rest = split_validation(_indexed(10), 9, seed=1)
    assert len(rest) == 1


@given(st.integers(2, 300), st.integers(0, 2**32 - 1), st.data())
@settings(max_examples=50, deadline=None)
def test_split_is_a_partition(n, seed, data):
    k = data.draw(st.integers(1, n - 1))
    val, rest = split_validation(_indexed(n), k, seed)
    a, b = set(val.features[:, 0].tolist()), set(rest.features[:, 0].tolist())
    assert not a & b
    assert a | b == set(range(n))
    val2, _ = split_validation(_indexed(n), k, seed)
    assert np.array_equal(val.features, val2.features)


def test_split_rejects_oversized_request():
    with pytest.raises(ValueError):
        split_validation(_indexed(10), 10, 0)
    with pytest.raises(ValueError):
        split_validation(_indexed(10), 0, 0)
