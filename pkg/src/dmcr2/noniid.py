"""Cluster-parallel, intra-cluster-sequential training for non-i.i.d. partitions.

Agents are expanded into virtual nodes ``(agent, replica)`` by the cluster
plan. Each round runs, in order:

1. dual ascent on every label-wise pair, from round t-1 statistics;
2. one block-coordinate pass per cluster: members update in schedule order,
   each reading fresh restricted Grams from the members before it and stale
   ones from the members after it, then forwarding its own;
3. parameter averaging over the replicas of every agent;
4. recomputation and posting of label-wise ``V_{i,k}`` to the holders of k.
"""

import csv
import logging
from fractions import Fraction

import numpy as np

from .data import noniid_proportions_ok
from .encoder import adam_step, average_params, backward, forward
from .errors import AssumptionViolated, PlanMismatch
from .iid import dual_update
from .network import GramStat, MailBox, node_label
from .objective import ClusterLossContext, RateParams, cluster_loss_terms
from .training import LossRow, TrainedState, batch_rng, batch_stream, class_grams, make_node_params, max_pairwise_gap

log = logging.getLogger(__name__)


def noniid_dual_update(Y_prev, V_i, V_j, rho):
    """Same affine ascent as the i.i.d. rule; only the peer set differs."""
    return dual_update(Y_prev, V_i, V_j, rho)


class BcdSchedule:
    """Per-cluster update order and the fresh/stale rule it implies.

    At round t the member in position p reads round-t statistics from
    positions before p and round-(t-1) statistics from positions after p.
    """

    def __init__(self, plan, order="ascending"):
        rows = plan.cluster_vnodes()
        if order == "descending":
            rows = [list(reversed(r)) for r in rows]
        elif order != "ascending":
            raise ValueError(f"unknown BCD order {order!r}")
        self.orders = rows

    def source_round(self, cluster, reader, peer, t):
        row = self.orders[cluster]
        return t if row.index(peer) < row.index(reader) else t - 1


def restricted_gram(Z, labels, exclude, s_j):
    """``(1/S_j) sum_{k not in exclude} Z_k Z_k^T`` on one node's full data."""
    keep = ~np.isin(labels, list(exclude))
    Zr = Z[:, keep]
    return (Zr @ Zr.T) / s_j


def average_virtual_nodes(replicas):
    """Average replica parameters and hand one independent copy back to each replica."""
    mean = average_params(replicas)
    return [mean.copy() for _ in replicas]


class _Layout:
    """Static bookkeeping for one plan over one set of agent partitions."""

    def __init__(self, parts, plan):
        if plan.n_agents != len(parts):
            raise PlanMismatch(f"plan covers {plan.n_agents} agents, got {len(parts)} partitions")
        self.plan = plan
        self.S = plan.replication
        self.vnodes = [v for row in plan.cluster_vnodes() for v in row]
        self.cluster_of = plan.cluster_of()
        self.labels = {a: set(int(k) for k in p.classes()) for a, p in enumerate(parts)}
        self.counts = {a: {int(k): int(c) for k, c in enumerate(p.class_counts()) if c} for a, p in enumerate(parts)}
        self.holders = {}
        for v in self.vnodes:
            for k in self.labels[v[0]]:
                self.holders.setdefault(k, []).append(v)
        self.classes = sorted(self.holders)
        self.cluster_m = []
        counts = plan.sample_counts([self.counts[a] for a in range(plan.n_agents)])
        for per, total in counts:
            self.cluster_m.append((per, total))

    def label_peers(self, v, k):
        return [u for u in self.holders[k] if u != v]

    def cluster_members(self, v):
        return self.plan.cluster_vnodes()[self.cluster_of[v]]


def noniid_bytes_closed_form(plan, label_sets, d, rounds, bytes_per_entry=8):
    """Exact total bytes: restricted Grams to every cluster peer plus label-wise V to every holder.

    ``rounds`` counts the initial broadcast plus the training rounds.
    """
    intra = sum(len(row) * (len(row) - 1) for row in plan.cluster_vnodes())
    holders = {}
    for row in plan.cluster_vnodes():
        for v in row:
            for k in label_sets[v[0]]:
                holders[k] = holders.get(k, 0) + 1
    label = sum(h * (h - 1) for h in holders.values())
    return rounds * (intra + label) * d * d * bytes_per_entry


def _post_restricted(mailbox, lay, v, Z, labels, t):
    for u in lay.cluster_members(v):
        if u == v:
            continue
        W = restricted_gram(Z, labels, lay.labels[v[0]] & lay.labels[u[0]], lay.S[v[0]])
        mailbox.post(v, [GramStat(v, None, Z.shape[1], W, t)], [u])


def _post_labelwise(mailbox, lay, v, Z, labels, t, own):
    dev = 0.0
    for k, (V, mk) in class_grams(Z, labels).items():
        own[(v, k)] = V
        dev = max(dev, abs(float(np.trace(V)) - 1.0))
        mailbox.post(v, [GramStat(v, k, mk, V, t)], lay.label_peers(v, k))
    return dev


def _context(v, t, lay, sched, mailbox, duals, own, config, fixed_round=None):
    # fixed_round reads every statistic from one round (used for the initial loss)
    a = v[0]
    s = lay.cluster_of[v]
    per, total = lay.cluster_m[s]
    peer_grams, used = {}, {}
    shared = {}
    for u in sched.orders[s]:
        if u == v:
            continue
        r = sched.source_round(s, v, u, t) if fixed_round is None else fixed_round
        peer_grams[u] = mailbox.read(v, u, None, r).matrix
        used[u] = r
        for k in lay.labels[a] & lay.labels[u[0]]:
            shared.setdefault(k, []).append((u, lay.counts[u[0]][k], lay.S[u[0]]))
    label_peers = {k: lay.label_peers(v, k) for k in sorted(lay.labels[a])}
    peer_prev = {}
    for k, peers in label_peers.items():
        for u in peers:
            peer_prev[(u, k)] = mailbox.read(v, u, k, t - 1 if fixed_round is None else fixed_round).matrix
    ctx = ClusterLossContext(
        node=v,
        s_self=lay.S[a],
        cluster_m=total,
        class_cluster_m=dict(per),
        full_counts=lay.counts[a],
        peer_grams=peer_grams,
        shared=shared,
        label_peers=label_peers,
        duals={(u, k): duals[(v, u, k)] for k, peers in label_peers.items() for u in peers},
        self_prev={k: own[(v, k)] for k in label_peers},
        peer_prev=peer_prev,
        gamma=config.gamma,
        substitute=config.substitute,
        compression_weight=config.compression_weight,
    )
    return ctx, used


def bcd_cluster_pass(s, t, sched, lay, state, params, adams, streams, parts, duals, own, rate, config):
    """Sequential update of every member of cluster ``s`` for round ``t``; returns loss rows."""
    mailbox = state.mailbox
    rows = []
    for p, v in enumerate(sched.orders[s]):
        a = v[0]
        X, y = parts[a].inputs, parts[a].labels
        ctx, used = _context(v, t, lay, sched, mailbox, duals, own, config)
        state.cluster_trace.append((t, s, p, v, tuple(sorted(used.items()))))
        state.stale_audit.append({"round": t, "cluster": s, "position": p, "node": v, "used": used})
        for _ in range(config.steps_for(parts[a].m)):
            idx = next(streams[v])
            Zb, cache = forward(params[v], X[:, idx], return_cache=True)
            _, gZ = cluster_loss_terms(Zb, y[idx], ctx, rate, want_grad=True)
            adam_step(params[v], backward(params[v], X[:, idx], gZ, cache), adams[v])
        Z = forward(params[v], X)
        terms, _ = cluster_loss_terms(Z, y, ctx, rate)
        rows.append(LossRow(t, v, terms.rc, terms.r, terms.dual, terms.penalty))
        _post_restricted(mailbox, lay, v, Z, y, t)
        if "history" in state.extra:
            state.extra["history"][(t, v)] = params[v].copy()
    return rows


def run_noniid(parts, plan, config, check_assumption=True, keep_history=False, callback=None):
    """Decentralized rate-reduction training over a clustered non-i.i.d. partition.

    ``parts`` holds one Dataset per agent. With ``keep_history`` the parameters
    of every virtual node after its BCD step are kept in
    ``state.extra["history"]`` keyed by ``(round, vnode)``.
    """
    lay = _Layout(parts, plan)
    if check_assumption and not noniid_proportions_ok(parts, plan):
        raise AssumptionViolated("class proportions m_k^s/m^s differ across clusters")
    total_m = sum(p.m for p in parts)
    if sum((ms for _, ms in lay.cluster_m), Fraction(0)) != total_m:
        raise PlanMismatch("cluster sizes do not add up to the dataset size")
    rate = RateParams(config.eps_sq, total_m)
    sched = BcdSchedule(plan, config.bcd_order)
    mailbox = MailBox(lay.vnodes)
    params, adams, streams = {}, {}, {}
    for v in lay.vnodes:
        # replicas of one agent start from the agent's initialization
        params[v], adams[v] = make_node_params(config, parts[v[0]].n_features, v[0])
        streams[v] = batch_stream(parts[v[0]].labels, config.batch_size, batch_rng(config, v))
    duals = {
        (v, u, k): np.zeros((config.out_dim, config.out_dim))
        for k in lay.classes
        for v in lay.holders[k]
        for u in lay.label_peers(v, k)
    }
    state = TrainedState(params=params, mailbox=mailbox, duals=duals, kind="noniid")
    state.dual_updates = {v: 0 for v in lay.vnodes}
    if keep_history:
        state.extra["history"] = {}

    own = {}
    for v in lay.vnodes:
        X, y = parts[v[0]].inputs, parts[v[0]].labels
        Z = forward(params[v], X)
        state.trace_deviation = max(state.trace_deviation, _post_labelwise(mailbox, lay, v, Z, y, 0, own))
        _post_restricted(mailbox, lay, v, Z, y, 0)
    for v in lay.vnodes:
        ctx, _ = _context(v, 0, lay, sched, mailbox, duals, own, config, fixed_round=0)
        ctx.duals = {key: np.zeros_like(Y) for key, Y in ctx.duals.items()}
        ctx.gamma = 0.0
        terms, _ = cluster_loss_terms(forward(params[v], parts[v[0]].inputs), parts[v[0]].labels, ctx, rate)
        state.initial.append(LossRow(0, v, terms.rc, terms.r, terms.dual, terms.penalty))
    state.consensus.append((0, max_pairwise_gap(own, lay.vnodes, lay.classes)))

    for t in range(1, config.rounds + 1):
        for (v, u, k), Y in duals.items():
            duals[(v, u, k)] = noniid_dual_update(Y, own[(v, k)], mailbox.read(v, u, k, t - 1).matrix, config.rho)
            state.dual_updates[v] += 1
        worst = max((float(np.max(np.abs(Y + duals[(u, v, k)]))) for (v, u, k), Y in duals.items()), default=0.0)
        state.antisymmetry.append((t, worst))
        total = sum(duals.values()) if duals else 0.0
        state.dual_sums.append((t, float(np.max(np.abs(total))) if duals else 0.0))

        rows = []
        for s in range(len(sched.orders)):
            rows += bcd_cluster_pass(s, t, sched, lay, state, params, adams, streams, parts, duals, own, rate, config)

        for a, reps in plan.virtual_nodes.items():
            if len(reps) > 1:
                for v, p in zip(reps, average_virtual_nodes([params[v] for v in reps])):
                    params[v] = p
        for v in lay.vnodes:
            Z = forward(params[v], parts[v[0]].inputs)
            dev = _post_labelwise(mailbox, lay, v, Z, parts[v[0]].labels, t, own)
            state.trace_deviation = max(state.trace_deviation, dev)
        state.trajectory.append(rows)
        state.consensus.append((t, max_pairwise_gap(own, lay.vnodes, lay.classes)))
        mailbox.prune(t - 1)
        if callback is not None:
            callback(t, state)

    state.final_stats = dict(own)
    state.extra.update(classes=lay.classes, total_m=total_m, layout=lay, schedule=sched)
    return state


def write_cluster_trace(state, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "cluster", "position", "node", "fresh_stats_used"])
        for t, s, p, v, used in state.cluster_trace:
            fresh = ";".join(node_label(u) for u, r in used if r == t)
            w.writerow([t, s, p, node_label(v), fresh])
