"""Simulated communication fabric for round-synchronous decentralized training."""

import csv
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Optional

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import MissingStat, Unconnectable, UnknownRecipient

BYTES_PER_ENTRY = 8
MAX_RESAMPLES = 1000


@dataclass(frozen=True)
class Topology:
    adjacency: np.ndarray

    @property
    def n_nodes(self):
        return self.adjacency.shape[0]

    def neighbors(self, i):
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def is_connected(self):
        if self.n_nodes <= 1:
            return True
        n, _ = connected_components(self.adjacency.astype(np.int8), directed=False)
        return n == 1

    def edges(self):
        iu = np.triu_indices(self.n_nodes, 1)
        return [(int(a), int(b)) for a, b in zip(*iu) if self.adjacency[a, b]]


def build_topology(n_nodes, p, seed=0):
    """Connected Erdos-Renyi graph G(N, p), resampled until connected."""
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    if not 0 < p <= 1:
        raise ValueError("edge probability must lie in (0, 1]")
    for attempt in range(MAX_RESAMPLES):
        rng = np.random.default_rng([seed, attempt])
        upper = np.triu(rng.random((n_nodes, n_nodes)) < p, 1)
        topo = Topology(upper | upper.T)
        if topo.is_connected():
            return topo
    raise Unconnectable(f"no connected G({n_nodes}, {p}) after {MAX_RESAMPLES} draws")


def complete_topology(n_nodes):
    adj = ~np.eye(n_nodes, dtype=bool)
    return Topology(adj)


@dataclass(frozen=True)
class GramStat:
    """A d x d second-order statistic sent between nodes.

    ``klass`` is the class id for label-wise V_{i,k}; ``None`` marks a
    whole-node Gram (1/S_i) Z_i Z_i^T forwarded inside a cluster.
    """

    sender: Hashable
    klass: Optional[int]
    count: float
    matrix: np.ndarray
    round: int

    @property
    def key(self):
        return self.klass


class MailBox:
    """Per-recipient store of stats keyed by (sender, class, round).

    Every delivery is charged ``d*d*8`` bytes to the sender for the round the
    stat was posted in. Posting is guarded by a lock so node workers can post
    concurrently; reads only ever return the exact round requested.
    """

    def __init__(self, nodes, bytes_per_entry=BYTES_PER_ENTRY):
        self.nodes = list(nodes)
        self._known = set(self.nodes)
        self.bytes_per_entry = bytes_per_entry
        self._store = {n: {} for n in self.nodes}
        self._bytes = defaultdict(int)
        self._lock = threading.Lock()
        self.posted_types = set()

    def post(self, sender, stats, recipients):
        recipients = list(recipients)
        for r in recipients:
            if r not in self._known:
                raise UnknownRecipient(r)
        if sender not in self._known:
            raise UnknownRecipient(sender)
        with self._lock:
            for stat in stats:
                if not isinstance(stat, GramStat):
                    raise TypeError(f"only GramStat payloads may be posted, got {type(stat).__name__}")
                self.posted_types.add(type(stat).__name__)
                cost = stat.matrix.size * self.bytes_per_entry
                for r in recipients:
                    self._store[r][(stat.sender, stat.klass, stat.round)] = stat
                    self._bytes[(stat.round, sender)] += cost

    def read(self, node, sender, klass, round_):
        try:
            return self._store[node][(sender, klass, round_)]
        except KeyError:
            raise MissingStat(sender, klass, round_, receiver=node) from None

    def read_round(self, node, round_):
        """All stats delivered to ``node`` that were posted in ``round_``."""
        return {
            (s, k): stat for (s, k, r), stat in self._store[node].items() if r == round_
        }

    def prune(self, before_round):
        """Drop stats older than ``before_round`` (keeps memory flat on long runs)."""
        with self._lock:
            for box in self._store.values():
                for key in [k for k in box if k[2] < before_round]:
                    del box[key]

    def bytes_sent(self, round_=None, node=None):
        return sum(
            v
            for (r, n), v in self._bytes.items()
            if (round_ is None or r == round_) and (node is None or n == node)
        )

    def byte_log(self):
        """Rows ``(round, node, bytes)`` sorted by round then node id."""
        return sorted((r, n, v) for (r, n), v in self._bytes.items())

    def write_cost_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["round", "node", "bytes_sent"])
            for r, n, v in self.byte_log():
                w.writerow([r, node_label(n), v])


def node_label(node):
    if isinstance(node, tuple):
        return ":".join(str(x) for x in node)
    return str(node)


def iid_bytes_closed_form(topology, n_classes, d, rounds, bytes_per_entry=BYTES_PER_ENTRY):
    """Total bytes of the i.i.d. run: every node sends K stats to each neighbor per round.

    ``rounds`` counts the initial broadcast plus the training rounds.
    """
    degree_sum = int(topology.adjacency.sum())
    return rounds * degree_sum * n_classes * d * d * bytes_per_entry
