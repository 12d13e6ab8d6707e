import gzip
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmcr2.clustering import cluster_with_replication
from dmcr2.data import (
    Dataset,
    PartitionSpec,
    cluster_counts,
    dumps_dataset,
    dumps_idx,
    enforce_proportions,
    gen_synthetic_subspaces,
    iid_proportions_ok,
    load_idx,
    load_mnist,
    loads_dataset,
    noniid_proportions_ok,
    parse_idx,
    partition,
    train_test_split,
)
from dmcr2.errors import (
    AssumptionViolated,
    BadDims,
    BadMagic,
    EmptyClass,
    IdxError,
    InsufficientSamples,
    TruncatedPayload,
    TypeUnsupported,
    UncoverableLabel,
)

from conftest import MNIST

FOUR_NODE_LABELS = [[1, 2, 3, 4, 5], [6, 7, 8, 9, 0], [0, 3, 5, 7, 9], [1, 2, 4, 6, 8]]


def labelled(counts):
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(counts)])
    return Dataset(np.arange(labels.size, dtype=float)[None, :], labels)


# synthetic subspaces


def test_synthetic_rank_one_classes_are_colinear():
    ds = gen_synthetic_subspaces(2, 1, 20, 8, noise=0.0, seed=0)
    X0 = ds.inputs[:, ds.labels == 0]
    assert np.linalg.matrix_rank(X0, tol=1e-10) == 1


def test_synthetic_cross_class_cosines_are_small():
    ds = gen_synthetic_subspaces(3, 3, 50, 32, noise=0.05, seed=1)
    U = ds.inputs / np.linalg.norm(ds.inputs, axis=0)
    C = np.abs(U.T @ U)
    cross = C[ds.labels[:, None] != ds.labels[None, :]]
    assert cross.max() < 0.2


def test_synthetic_is_seeded():
    a = gen_synthetic_subspaces(3, 2, 10, 9, 0.1, seed=4)
    b = gen_synthetic_subspaces(3, 2, 10, 9, 0.1, seed=4)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)


@pytest.mark.parametrize("args", [(3, 4, 10, 10), (2, 0, 10, 5), (2, [1, 2, 3], 10, 10)])
def test_synthetic_bad_dims(args):
    with pytest.raises(BadDims):
        gen_synthetic_subspaces(*args)


def test_train_test_split_is_stratified_and_disjoint():
    ds = gen_synthetic_subspaces(3, 2, 20, 8, seed=2)
    tr, te = train_test_split(ds, 5, seed=0)
    assert list(te.class_counts()) == [5, 5, 5] and list(tr.class_counts()) == [15, 15, 15]
    assert not set(tr.source_index) & set(te.source_index)


# IDX


def test_idx_three_byte_vector():
    arr, dims = parse_idx(bytes([0, 0, 0x08, 1, 0, 0, 0, 3, 1, 2, 3]))
    assert dims == (3,)
    np.testing.assert_array_equal(arr, [1, 2, 3])


def test_idx_roundtrip_all_types():
    rng = np.random.default_rng(0)
    for dtype in ("u1", "i1", ">i2", ">i4", ">f4", ">f8"):
        arr = (rng.standard_normal((2, 3)) * 50).astype(dtype)
        back, dims = parse_idx(dumps_idx(arr))
        assert dims == (2, 3)
        np.testing.assert_array_equal(back, arr)


def test_idx_errors():
    with pytest.raises(BadMagic):
        parse_idx(bytes([1, 0, 8, 1, 0, 0, 0, 1, 5]))
    with pytest.raises(TypeUnsupported):
        parse_idx(bytes([0, 0, 0x0A, 1, 0, 0, 0, 1, 5]))
    with pytest.raises(TruncatedPayload):
        parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 3, 1, 2]))
    with pytest.raises(TruncatedPayload):
        parse_idx(bytes([0, 0, 8, 2, 0, 0]))
    with pytest.raises(IdxError):
        parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 1, 1, 2]))


def test_mnist_fixture_header_and_dims():
    raw = gzip.decompress((MNIST / "train-images-idx3-ubyte.gz").read_bytes())
    assert raw[:4] == bytes([0, 0, 0x08, 3])
    assert struct.unpack(">3I", raw[4:16]) == (2000, 28, 28)
    arr, dims = load_idx(MNIST / "train-images-idx3-ubyte.gz")
    assert dims == (2000, 28, 28) and arr.dtype == np.uint8


def test_load_mnist_scales_and_counts():
    ds = load_mnist(MNIST / "train-images-idx3-ubyte.gz", MNIST / "train-labels-idx1-ubyte.gz", limit=100)
    assert ds.inputs.shape == (784, 100) and ds.provenance == "idx"
    assert 0.0 <= ds.inputs.min() and ds.inputs.max() <= 1.0
    full = load_mnist(MNIST / "train-images-idx3-ubyte.gz", MNIST / "train-labels-idx1-ubyte.gz")
    assert list(full.class_counts()) == [200] * 10


def test_dataset_cache_roundtrip():
    ds = gen_synthetic_subspaces(2, 2, 5, 6, 0.1, seed=3)
    back = loads_dataset(dumps_dataset(ds))
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)


# partitioning


def test_iid_partition_splits_each_class_evenly():
    parts = partition(labelled([10, 6, 8]), PartitionSpec("iid", 2, seed=0))
    for p in parts:
        assert list(p.class_counts(3)) == [5, 3, 4]


def test_by_labels_partition_respects_label_sets():
    parts = partition(labelled([20] * 10), PartitionSpec("by-labels", label_sets=FOUR_NODE_LABELS, seed=0))
    assert parts[0].classes() == [1, 2, 3, 4, 5]
    for p, ls in zip(parts, FOUR_NODE_LABELS):
        assert set(p.classes()) == set(ls)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(4, 30), min_size=2, max_size=5), st.integers(1, 4), st.integers(0, 1000))
def test_partition_is_lossless(counts, n, seed):
    ds = labelled(counts)
    parts = partition(ds, PartitionSpec("iid", n, seed=seed))
    got = np.sort(np.concatenate([p.source_index for p in parts]))
    np.testing.assert_array_equal(got, np.arange(ds.m))


def test_partition_errors():
    with pytest.raises(InsufficientSamples):
        partition(labelled([1, 5]), PartitionSpec("iid", 3))
    with pytest.raises(UncoverableLabel):
        partition(labelled([5, 5, 5]), PartitionSpec("by-labels", label_sets=[[0], [1]]))


# proportion enforcement


def test_proportional_parts_unchanged():
    parts = partition(labelled([10, 6]), PartitionSpec("iid", 2, seed=0))
    out, dup = enforce_proportions(parts, "iid", n_classes=2)
    assert dup == {}
    for a, b in zip(parts, out):
        np.testing.assert_array_equal(a.source_index, b.source_index)


def test_one_missing_sample_adds_one_duplicate():
    parts = partition(labelled([9, 6]), PartitionSpec("iid", 2, seed=0))
    assert not iid_proportions_ok(parts, 2)
    out, dup = enforce_proportions(parts, "iid", n_classes=2, seed=1)
    assert sum(dup.values()) == 1
    assert iid_proportions_ok(out, 2)


def test_empty_class_cannot_be_enforced():
    parts = [labelled([4, 4]), labelled([4, 0])]
    with pytest.raises(EmptyClass):
        enforce_proportions(parts, "iid", n_classes=2)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.integers(1, 12), min_size=3, max_size=3), min_size=2, max_size=4), st.integers(0, 99))
def test_iid_enforcement_exact_integer_audit(rows, seed):
    parts = [labelled(r) for r in rows]
    out, _ = enforce_proportions(parts, "iid", n_classes=3, seed=seed)
    counts = [o.class_counts(3) for o in out]
    ref = [Fraction(int(v), int(counts[0].sum())) for v in counts[0]]
    for c in counts:
        assert [Fraction(int(v), int(c.sum())) for v in c] == ref


def test_noniid_enforcement_with_replication():
    # agent 0 sits in both clusters beside one class-2 holder each
    sets = [[0, 1], [2], [2]]
    plan = cluster_with_replication(sets)
    assert plan.replication[0] == 2
    parts = partition(labelled([12, 12, 13]), PartitionSpec("by-labels", label_sets=sets, seed=0))
    assert not noniid_proportions_ok(parts, plan)
    out, _ = enforce_proportions(parts, "noniid", plan, 3, seed=0)
    assert noniid_proportions_ok(out, plan)
    shares = [{k: v / tot for k, v in per.items()} for per, tot in cluster_counts(out, plan)]
    assert shares[0] == shares[1]


def test_five_agent_replicated_plan_cannot_be_equalized():
    # agent 1 alone holds classes 0 and 5 in cluster {1,2,3} but shares them in
    # {0,1,4}, and the reverse for 7 and 8; equal proportions would need
    # lambda_0 > lambda_1 and lambda_1 > lambda_0 at once
    sets = [[1, 3, 5, 6], [0, 5, 7, 8], [1, 3, 8, 9], [2, 4, 6, 7], [0, 2, 4, 9]]
    plan = cluster_with_replication(sets)
    parts = partition(labelled([12] * 10), PartitionSpec("by-labels", label_sets=sets, seed=0))
    with pytest.raises(AssumptionViolated):
        enforce_proportions(parts, "noniid", plan, 10, seed=0, max_iter=500)
