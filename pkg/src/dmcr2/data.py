"""Datasets: synthetic union-of-subspaces, IDX ingestion, partitioning.

Inputs are stored column-per-sample (``n_features x m``) to match the
feature-matrix orientation used everywhere else.
"""

import gzip
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import reduce
from typing import List, Optional, Sequence

import numpy as np

from .errors import (
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

log = logging.getLogger(__name__)

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
CACHE_MAGIC = b"MC2D"
CACHE_VERSION = 1
PROVENANCE = ("synthetic", "idx")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic"
    source_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[1] != self.labels.shape[0]:
            raise BadDims("inputs and labels disagree on sample count")
        if self.source_index is None:
            self.source_index = np.arange(self.labels.size)

    @property
    def m(self):
        return self.labels.size

    @property
    def n_features(self):
        return self.inputs.shape[0]

    def class_counts(self, n_classes=None):
        n = n_classes if n_classes is not None else (int(self.labels.max()) + 1 if self.m else 0)
        return np.bincount(self.labels, minlength=n)

    def classes(self):
        return sorted(int(k) for k in np.unique(self.labels))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[:, idx], self.labels[idx], self.provenance, self.source_index[idx])


def gen_synthetic_subspaces(n_classes, class_dim, per_class, ambient_dim, noise=0.0, seed=0):
    """Samples from mutually orthogonal random subspaces, one per class.

    ``class_dim`` is an int or one dimension per class. Class k draws isotropic
    Gaussian coefficients (variance 1/d_k) in its own orthonormal frame and adds
    Gaussian noise of standard deviation ``noise / sqrt(ambient_dim)``.
    """
    dims = [class_dim] * n_classes if np.isscalar(class_dim) else list(class_dim)
    if len(dims) != n_classes or any(d_k < 1 for d_k in dims):
        raise BadDims("need one positive subspace dimension per class")
    if sum(dims) > ambient_dim:
        raise BadDims(f"sum of class dims {sum(dims)} exceeds ambient dim {ambient_dim}")
    if noise < 0:
        raise BadDims("noise must be non-negative")
    rng = np.random.default_rng(seed)
    frame, _ = np.linalg.qr(rng.standard_normal((ambient_dim, sum(dims))))
    counts = [per_class] * n_classes if np.isscalar(per_class) else list(per_class)
    cols, labels = [], []
    start = 0
    for k, (d_k, n_k) in enumerate(zip(dims, counts)):
        U = frame[:, start : start + d_k]
        start += d_k
        coef = rng.standard_normal((d_k, n_k)) / np.sqrt(d_k)
        X = U @ coef + (noise / np.sqrt(ambient_dim)) * rng.standard_normal((ambient_dim, n_k))
        cols.append(X)
        labels.append(np.full(n_k, k))
    return Dataset(np.hstack(cols), np.concatenate(labels), "synthetic")


def train_test_split(dataset, test_per_class, seed=0):
    """Stratified split holding out ``test_per_class`` samples of each class."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in dataset.classes():
        idx = rng.permutation(np.flatnonzero(dataset.labels == k))
        if idx.size <= test_per_class:
            raise InsufficientSamples(f"class {k} has only {idx.size} samples")
        test.append(idx[:test_per_class])
        train.append(idx[test_per_class:])
    return dataset.subset(np.sort(np.concatenate(train))), dataset.subset(np.sort(np.concatenate(test)))


def parse_idx(blob):
    """Decode an IDX buffer into ``(array, dims)``; the payload length must match exactly."""
    blob = bytes(blob)
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise BadMagic("IDX data must start with two zero bytes")
    code, rank = blob[2], blob[3]
    if code not in IDX_TYPES:
        raise TypeUnsupported(f"IDX type code 0x{code:02X} is not supported")
    header = 4 + 4 * rank
    if len(blob) < header:
        raise TruncatedPayload(f"header needs {header} bytes, got {len(blob)}")
    dims = struct.unpack(f">{rank}I", blob[4:header])
    dtype = IDX_TYPES[code]
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) < expected:
        raise TruncatedPayload(f"payload needs {expected - header} bytes, got {len(blob) - header}")
    if len(blob) > expected:
        raise IdxError(f"{len(blob) - expected} trailing bytes after IDX payload")
    arr = np.frombuffer(blob, dtype=dtype, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("=")), tuple(dims)


def dumps_idx(arr, code=None):
    arr = np.asarray(arr)
    if code is None:
        code = next(c for c, dt in IDX_TYPES.items() if dt.kind == arr.dtype.kind and dt.itemsize == arr.dtype.itemsize)
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(IDX_TYPES[code]).tobytes()


def load_idx(path):
    with open(path, "rb") as f:
        blob = f.read()
    if str(path).endswith(".gz"):
        blob = gzip.decompress(blob)
    return parse_idx(blob)


def load_mnist(images_path, labels_path, limit=None):
    """MNIST image/label IDX pair as a Dataset with pixels scaled to [0, 1]."""
    images, _ = load_idx(images_path)
    labels, _ = load_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise BadDims("image and label files disagree on sample count")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), "idx")


def dumps_dataset(ds):
    head = CACHE_MAGIC + struct.pack(
        "<BBII", CACHE_VERSION, PROVENANCE.index(ds.provenance), ds.n_features, ds.m
    )
    return head + ds.inputs.astype("<f8").tobytes() + ds.labels.astype("<i8").tobytes()


def loads_dataset(blob):
    if blob[:4] != CACHE_MAGIC:
        raise ValueError("not a dataset cache (bad magic)")
    version, prov, n_features, m = struct.unpack_from("<BBII", blob, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported dataset cache version {version}")
    off = 4 + struct.calcsize("<BBII")
    n_in = n_features * m
    inputs = np.frombuffer(blob, dtype="<f8", count=n_in, offset=off).reshape(n_features, m)
    labels = np.frombuffer(blob, dtype="<i8", count=m, offset=off + 8 * n_in)
    return Dataset(inputs.astype(np.float64), labels.astype(np.int64), PROVENANCE[prov])


def save_dataset(ds, path):
    with open(path, "wb") as f:
        f.write(dumps_dataset(ds))


def load_dataset(path):
    with open(path, "rb") as f:
        return loads_dataset(f.read())


@dataclass
class PartitionSpec:
    mode: str = "iid"
    n_nodes: int = 1
    label_sets: Optional[List[Sequence[int]]] = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "by-labels"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.mode == "by-labels":
            if not self.label_sets:
                raise ValueError("by-labels partitioning needs label_sets")
            self.n_nodes = len(self.label_sets)


def partition(dataset, spec):
    """Split a dataset across nodes without loss or duplication.

    i.i.d.: every class is shuffled and dealt out in near-equal chunks.
    by-labels: each class is split evenly among the nodes that hold it.
    """
    rng = np.random.default_rng(spec.seed)
    buckets = [[] for _ in range(spec.n_nodes)]
    for k in dataset.classes():
        idx = rng.permutation(np.flatnonzero(dataset.labels == k))
        if spec.mode == "iid":
            holders = list(range(spec.n_nodes))
        else:
            holders = [i for i, ls in enumerate(spec.label_sets) if k in set(ls)]
            if not holders:
                raise UncoverableLabel(f"class {k} is held by no node")
        if idx.size < len(holders):
            raise InsufficientSamples(f"class {k} has {idx.size} samples for {len(holders)} nodes")
        for i, chunk in zip(holders, np.array_split(idx, len(holders))):
            buckets[i].append(chunk)
    if spec.mode == "by-labels":
        present = set(dataset.classes())
        for i, ls in enumerate(spec.label_sets):
            missing = set(ls) - present
            if missing:
                raise InsufficientSamples(f"node {i} holds labels {sorted(missing)} absent from data")
    parts = []
    for i, chunks in enumerate(buckets):
        if not chunks:
            raise InsufficientSamples(f"node {i} received no samples")
        parts.append(dataset.subset(np.sort(np.concatenate(chunks))))
    return parts


def _duplicate(part, k, n, rng):
    idx = np.flatnonzero(part.labels == k)
    if idx.size == 0:
        raise EmptyClass(f"cannot duplicate class {k}: node holds no samples of it")
    extra = rng.choice(idx, size=n, replace=True)
    return part.subset(np.concatenate([np.arange(part.m), extra]))


def _base_proportions(counts):
    # smallest integer vector proportional to the per-class maxima
    top = np.max(counts, axis=0)
    present = top[top > 0]
    g = reduce(math.gcd, (int(v) for v in present))
    return np.where(top > 0, top // g, 0)


def iid_proportions_ok(parts, n_classes):
    """Assumption 1: m_{i,k}/m_i identical across nodes (exact rationals)."""
    ref = None
    for p in parts:
        c = p.class_counts(n_classes)
        props = tuple(Fraction(int(v), int(c.sum())) for v in c)
        if ref is None:
            ref = props
        elif props != ref:
            return False
    return True


def cluster_counts(parts, plan):
    """Exact ``(m_k^s, m^s)`` per cluster as Fractions, given agent partitions."""
    out = []
    for members in plan.clusters:
        per_class = Counter()
        for agent in members:
            s_i = plan.replication[agent]
            for k, v in enumerate(parts[agent].class_counts()):
                if v:
                    per_class[k] += Fraction(int(v), s_i)
        out.append((dict(per_class), sum(per_class.values(), Fraction(0))))
    return out


def noniid_proportions_ok(parts, plan):
    """Assumption 4: m_k^s/m^s identical across clusters (exact rationals)."""
    ref = None
    for per_class, total in cluster_counts(parts, plan):
        props = {k: v / total for k, v in per_class.items() if v}
        if ref is None:
            ref = props
        elif props != ref:
            return False
    return True


def enforce_proportions(parts, mode="iid", plan=None, n_classes=None, seed=0, max_iter=100000):
    """Duplicate samples within classes until the proportion assumption holds exactly.

    Returns ``(adjusted_parts, duplication_log)`` where the log maps
    ``(node, class)`` to the number of duplicates added.
    """
    rng = np.random.default_rng(seed)
    parts = list(parts)
    dup = Counter()
    if n_classes is None:
        n_classes = max(int(p.labels.max()) for p in parts) + 1
    if mode == "iid":
        counts = np.array([p.class_counts(n_classes) for p in parts])
        for i in range(len(parts)):
            for k in range(n_classes):
                if counts[:, k].any() and counts[i, k] == 0:
                    raise EmptyClass(f"node {i} has no samples of class {k}")
        base = _base_proportions(counts)
        for i, p in enumerate(parts):
            lam = max(math.ceil(counts[i, k] / base[k]) for k in range(n_classes) if base[k])
            for k in range(n_classes):
                need = lam * base[k] - counts[i, k]
                if need > 0:
                    parts[i] = _duplicate(parts[i], k, int(need), rng)
                    dup[(i, k)] += int(need)
    elif mode in ("noniid", "by-labels"):
        if plan is None:
            raise ValueError("non-i.i.d. enforcement needs a cluster plan")
        parts, dup = _enforce_clusters(parts, plan, n_classes, rng, max_iter)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for key, n in sorted(dup.items()):
        log.info("duplicated %d samples of class %d on node %d", n, key[1], key[0])
    return parts, dict(dup)


def _enforce_clusters(parts, plan, n_classes, rng, max_iter):
    unit = reduce(math.lcm, plan.replication.values(), 1)
    counts = np.array([p.class_counts(n_classes) for p in parts], dtype=np.int64)
    inc = {a: unit // s for a, s in plan.replication.items()}
    global_counts = counts.sum(axis=0)
    base = _base_proportions(global_counts[None, :])
    dup = Counter()

    def units():
        u = np.zeros((len(plan.clusters), n_classes), dtype=np.int64)
        for s, members in enumerate(plan.clusters):
            for a in members:
                u[s] += inc[a] * counts[a]
        return u

    for _ in range(max_iter):
        u = units()
        done = True
        for s, members in enumerate(plan.clusters):
            lam = max(math.ceil(u[s, k] / base[k]) for k in range(n_classes) if base[k])
            for k in range(n_classes):
                deficit = lam * base[k] - u[s, k]
                if deficit <= 0:
                    continue
                done = False
                holders = [a for a in members if counts[a, k] > 0]
                if not holders:
                    raise AssumptionViolated(f"cluster {s} has no holder of class {k}")
                # largest increment that fits, else the smallest one (overshoot raises lam)
                fitting = [a for a in holders if inc[a] <= deficit]
                a = max(fitting, key=lambda x: (inc[x], -x)) if fitting else min(holders, key=lambda x: (inc[x], x))
                n = max(deficit // inc[a], 1)
                counts[a, k] += n
                dup[(a, k)] += int(n)
                break
            if not done:
                break
        if done:
            break
    else:
        raise AssumptionViolated("could not equalize cluster class proportions")
    for (a, k), n in dup.items():
        parts[a] = _duplicate(parts[a], k, n, rng)
    return parts, dup
