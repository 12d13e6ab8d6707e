"""Greedy label-cover clustering with local replication of agents."""

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional

from .errors import UncoverableLabel


@dataclass
class ClusterPlan:
    """Cluster membership plus the virtual-node bookkeeping derived from it.

    ``clusters`` lists agent ids per cluster in BCD order. A virtual node is the
    pair ``(agent, replica)`` where ``replica`` counts the agent's earlier
    appearances, so unreplicated agents are always ``(agent, 0)``.
    """

    clusters: List[List[int]]
    n_agents: int
    S: Optional[Dict[int, int]] = None

    def __post_init__(self):
        if self.S is None:
            self.S = {a: 0 for a in range(self.n_agents)}
            for members in self.clusters:
                for a in members:
                    self.S[a] += 1

    @property
    def replication(self):
        return self.S

    @property
    def virtual_nodes(self):
        """agent -> list of its virtual node ids, in cluster order."""
        out = {a: [] for a in range(self.n_agents)}
        for members in self.clusters:
            for a in members:
                out[a].append((a, len(out[a])))
        return out

    def cluster_vnodes(self):
        """Per cluster, the ordered virtual node ids."""
        seen = {a: 0 for a in range(self.n_agents)}
        out = []
        for members in self.clusters:
            row = []
            for a in members:
                row.append((a, seen[a]))
                seen[a] += 1
            out.append(row)
        return out

    def cluster_of(self):
        return {v: s for s, row in enumerate(self.cluster_vnodes()) for v in row}

    def sample_counts(self, agent_class_counts):
        """Exact ``[(m_k^s dict, m^s)]`` per cluster from agent class counts."""
        S = self.replication
        out = []
        for members in self.clusters:
            per = {}
            for a in members:
                for k, v in agent_class_counts[a].items():
                    if v:
                        per[k] = per.get(k, Fraction(0)) + Fraction(int(v), S[a])
            out.append((per, sum(per.values(), Fraction(0))))
        return out

    def to_json(self):
        return {
            "clusters": [list(c) for c in self.clusters],
            "S": [self.replication[a] for a in range(self.n_agents)],
            "virtual_nodes": {
                str(a): [f"{a}:{r}" for _, r in vs] for a, vs in self.virtual_nodes.items()
            },
        }

    @classmethod
    def from_json(cls, obj, n_agents=None):
        clusters = [[int(a) for a in c] for c in obj["clusters"]]
        if n_agents is None:
            n_agents = len(obj["S"]) if "S" in obj else max(max(c) for c in clusters) + 1
        S = {a: int(v) for a, v in enumerate(obj["S"])} if "S" in obj else None
        return cls(clusters=clusters, n_agents=n_agents, S=S)

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def _argmax(candidates, label_sets, uncovered):
    # lowest id wins ties
    best, gain = None, -1
    for i in sorted(candidates):
        g = len(label_sets[i] & uncovered)
        if g > gain:
            best, gain = i, g
    return best, gain


def cluster_with_replication(label_sets, all_labels=None):
    """Cluster agents so each cluster covers every label.

    Unclustered agents are preferred; an agent already placed elsewhere is
    replicated only when no unclustered agent adds a missing label. The
    zero-gain guard keeps a useless unclustered agent from being picked.
    """
    sets = [frozenset(int(k) for k in ls) for ls in label_sets]
    universe = frozenset(all_labels) if all_labels is not None else frozenset().union(*sets)
    covered = frozenset().union(*sets) if sets else frozenset()
    missing = universe - covered
    if missing:
        raise UncoverableLabel(f"labels {sorted(missing)} are held by no agent")
    for i, ls in enumerate(sets):
        if not ls:
            raise ValueError(f"agent {i} holds no labels")
    unclustered = set(range(len(sets)))
    clusters = []
    while unclustered:
        members, uncovered = [], set(universe)
        while uncovered:
            pick, gain = _argmax(unclustered, sets, uncovered) if unclustered else (None, 0)
            if pick is not None and gain > 0:
                unclustered.discard(pick)
            else:
                pool = [i for i in range(len(sets)) if i not in members]
                pick, gain = _argmax(pool, sets, uncovered)
            members.append(pick)
            uncovered -= sets[pick]
        clusters.append(sorted(members))
    return ClusterPlan(clusters=clusters, n_agents=len(sets))


def validate_plan(plan, label_sets, all_labels=None, agent_counts=None):
    """List every violated plan invariant; an empty list means the plan is valid."""
    sets = [set(int(k) for k in ls) for ls in label_sets]
    universe = set(all_labels) if all_labels is not None else set().union(*sets)
    problems = []
    if plan.n_agents != len(sets):
        problems.append(f"plan covers {plan.n_agents} agents, label sets describe {len(sets)}")
    appear = {a: 0 for a in range(len(sets))}
    for s, members in enumerate(plan.clusters):
        if len(set(members)) != len(members):
            problems.append(f"cluster {s} lists an agent twice")
        got = set()
        for a in members:
            if a not in appear:
                problems.append(f"cluster {s} names unknown agent {a}")
                continue
            appear[a] += 1
            got |= sets[a]
        for k in sorted(universe - got):
            problems.append(f"cluster {s} misses label {k}")
    S = plan.replication
    for a, n in appear.items():
        if n == 0:
            problems.append(f"agent {a} belongs to no cluster")
        if S.get(a, 0) != n:
            problems.append(f"agent {a}: S={S.get(a)} but appears in {n} clusters")
    if agent_counts is not None:
        total = sum(sum(c.values()) for c in agent_counts)
        got = sum((ms for _, ms in plan.sample_counts(agent_counts)), Fraction(0))
        if got != total:
            problems.append(f"sum of cluster sizes {got} != {total}")
    return problems
