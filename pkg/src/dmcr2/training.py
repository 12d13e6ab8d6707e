"""Pieces shared by the i.i.d. and non-i.i.d. trainers."""

import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .encoder import adam_init, init_params


def derive_seed(master, *keys):
    """Deterministic 32-bit seed from a master seed and a path of names/ints."""
    words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return int(np.random.SeedSequence(entropy=int(master), spawn_key=tuple(words)).generate_state(1)[0])


@dataclass
class TrainConfig:
    rho: float = 0.1
    gamma: float = 1.0
    lr: float = 0.1
    weight_decay: float = 1e-5
    rounds: int = 1000
    local_epochs: int = 5
    local_steps: Optional[int] = None
    batch_size: int = 1000
    eps_sq: float = 0.5
    out_dim: int = 128
    hidden: Tuple[int, ...] = (64,)
    activation: str = "elu"
    seed: int = 0
    same_init: bool = False
    early_stop: bool = False
    early_stop_tol: float = 1e-5
    early_stop_window: int = 10
    grad_norm_every: int = 10
    dsgd_lr: float = 0.1
    substitute: bool = True
    compression_weight: str = "inner"
    bcd_order: str = "ascending"

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)

    def arch(self, n_in, hidden=None):
        return [n_in, *(self.hidden if hidden is None else hidden), self.out_dim]

    def steps_for(self, m_i):
        if self.local_steps is not None:
            return self.local_steps
        return self.local_epochs * math.ceil(m_i / self.batch_size)


@dataclass
class LossRow:
    round: int
    node: object
    rc: float
    r: float
    dual: float
    penalty: float

    @property
    def total(self):
        return self.rc - self.r + self.dual + self.penalty


@dataclass
class TrainedState:
    """Result of a training run: per-node parameters plus every logged trace."""

    params: Dict[object, object]
    trajectory: List[List[LossRow]] = field(default_factory=list)
    initial: List[LossRow] = field(default_factory=list)
    consensus: List[Tuple[int, float]] = field(default_factory=list)
    grad_norms: List[Tuple[int, float]] = field(default_factory=list)
    antisymmetry: List[Tuple[int, float]] = field(default_factory=list)
    dual_sums: List[Tuple[int, float]] = field(default_factory=list)
    final_stats: Dict[Tuple[object, int], np.ndarray] = field(default_factory=dict)
    duals: Dict[Tuple[object, object, int], np.ndarray] = field(default_factory=dict)
    mailbox: object = None
    trace_deviation: float = 0.0
    dual_updates: Dict[object, int] = field(default_factory=dict)
    cluster_trace: List[tuple] = field(default_factory=list)
    stale_audit: List[dict] = field(default_factory=list)
    kind: str = "mcr2"
    extra: Dict[str, object] = field(default_factory=dict)

    def mean_total(self, t):
        rows = self.initial if t == 0 else self.trajectory[t - 1]
        return float(np.mean([r.total for r in rows]))


def make_node_params(config, n_in, node, hidden=None):
    seed = derive_seed(config.seed, "init") if config.same_init else derive_seed(config.seed, "init", *_key(node))
    params = init_params(config.arch(n_in, hidden), config.activation, seed)
    adam = adam_init(params, lr=config.lr, weight_decay=config.weight_decay)
    return params, adam


def _key(node):
    return node if isinstance(node, tuple) else (node,)


def batch_rng(config, node):
    return np.random.default_rng(derive_seed(config.seed, "batch", *_key(node)))


def stratified_batches(labels, batch_size, rng):
    """Index batches for one epoch; each batch carries a slice of every local class."""
    labels = np.asarray(labels)
    m = labels.size
    if batch_size >= m:
        return [np.arange(m)]
    n_batches = math.ceil(m / batch_size)
    per_class = [
        np.array_split(rng.permutation(np.flatnonzero(labels == k)), n_batches)
        for k in np.unique(labels)
    ]
    return [np.sort(np.concatenate([chunks[b] for chunks in per_class])) for b in range(n_batches)]


def batch_stream(labels, batch_size, rng):
    while True:
        for b in stratified_batches(labels, batch_size, rng):
            yield b


def class_grams(Z, labels):
    """Per-class ``V_k = Z_k Z_k^T / m_k`` and counts for every class present."""
    out = {}
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        Zk = Z[:, idx]
        out[int(k)] = ((Zk @ Zk.T) / idx.size, idx.size)
    return out


def max_pairwise_gap(stats, nodes, classes):
    """max over node pairs and classes of ||V_{i,k} - V_{j,k}||_F."""
    worst = 0.0
    for k in classes:
        holders = [n for n in nodes if (n, k) in stats]
        for a in range(len(holders)):
            for b in range(a + 1, len(holders)):
                gap = np.linalg.norm(stats[(holders[a], k)] - stats[(holders[b], k)])
                worst = max(worst, float(gap))
    return worst


def params_grad_sq(grads):
    return float(sum(np.sum(gW * gW) + np.sum(gb * gb) for gW, gb in grads))
