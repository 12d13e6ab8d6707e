"""Parallel primal-dual training for i.i.d. partitions, plus reference baselines.

``run_iid`` is the decentralized trainer: every round each node ascends its
duals on last round's Gram statistics, takes T' encoder steps on its local
augmented Lagrangian, and broadcasts fresh per-class Grams to its neighbors.
``run_centralized`` descends the plain rate-reduction objective on pooled
data and ``run_dsgd_baseline`` trains a cross-entropy classifier with
neighborhood parameter averaging.
"""

import logging

import numpy as np

from .data import iid_proportions_ok
from .encoder import adam_step, average_params, backward, forward, init_params
from .errors import AssumptionViolated, ClassMismatch
from .network import GramStat, MailBox
from .objective import LocalLossContext, RateParams, iid_local_loss_terms, mcr2_delta_dense, mcr2_delta_grad
from .training import (
    LossRow,
    TrainedState,
    batch_rng,
    batch_stream,
    class_grams,
    derive_seed,
    make_node_params,
    max_pairwise_gap,
    params_grad_sq,
)

log = logging.getLogger(__name__)


def dual_update(Y_prev, V_i, V_j, rho):
    """``Y + rho (V_i - V_j)`` for two GramStats of the same class."""
    if isinstance(V_i, GramStat) and isinstance(V_j, GramStat):
        if V_i.klass != V_j.klass:
            raise ClassMismatch(f"class {V_i.klass} vs {V_j.klass}")
        V_i, V_j = V_i.matrix, V_j.matrix
    if np.shape(V_i) != np.shape(V_j) or np.shape(Y_prev) != np.shape(V_i):
        raise ClassMismatch("dual and statistics must share one shape")
    return Y_prev + rho * (V_i - V_j)


def _stats_message(node, Z, labels, round_):
    stats, dev = [], 0.0
    for k, (V, mk) in class_grams(Z, labels).items():
        stats.append(GramStat(node, k, mk, V, round_))
        dev = max(dev, abs(float(np.trace(V)) - 1.0))
    return stats, dev


def local_round(params, adam, X, y, ctx, rate, steps, batches):
    """T' encoder steps on the local augmented Lagrangian; returns the last batch terms."""
    terms = None
    for _ in range(steps):
        idx = next(batches)
        Xb, yb = X[:, idx], y[idx]
        Z, cache = forward(params, Xb, return_cache=True)
        terms, gZ = iid_local_loss_terms(Z, yb, ctx, rate, want_grad=True)
        adam_step(params, backward(params, Xb, gZ, cache), adam)
    return terms


def _full_grad_norm_sq(params, X, y, ctx, rate):
    Z, cache = forward(params, X, return_cache=True)
    _, gZ = iid_local_loss_terms(Z, y, ctx, rate, want_grad=True)
    return params_grad_sq(backward(params, X, gZ, cache))


def run_iid(parts, topology, config, check_assumption=True, callback=None):
    """Decentralized rate-reduction training over an i.i.d. partition.

    ``parts`` holds one Dataset per node; node ids are positions in the list
    and must match the topology. Deterministic for a fixed ``config.seed``.
    """
    n = len(parts)
    if topology.n_nodes != n:
        raise ValueError(f"topology has {topology.n_nodes} nodes, got {n} partitions")
    classes = sorted(set().union(*(p.classes() for p in parts)))
    if check_assumption and not iid_proportions_ok(parts, len(classes)):
        raise AssumptionViolated("per-class proportions m_ik/m_i differ across nodes")
    total_m = sum(p.m for p in parts)
    rate = RateParams(config.eps_sq, total_m)
    nodes = list(range(n))
    nbrs = {i: topology.neighbors(i) for i in nodes}
    mailbox = MailBox(nodes)
    params, adams, streams = {}, {}, {}
    for i in nodes:
        params[i], adams[i] = make_node_params(config, parts[i].n_features, i)
        streams[i] = batch_stream(parts[i].labels, config.batch_size, batch_rng(config, i))
    duals = {(i, j, k): np.zeros((config.out_dim, config.out_dim)) for i in nodes for j in nbrs[i] for k in classes}
    state = TrainedState(params=params, mailbox=mailbox, duals=duals)

    own = {}
    for i in nodes:
        Z = forward(params[i], parts[i].inputs)
        stats, dev = _stats_message(i, Z, parts[i].labels, 0)
        state.trace_deviation = max(state.trace_deviation, dev)
        own.update({(i, s.klass): s.matrix for s in stats})
        mailbox.post(i, stats, nbrs[i])
        terms, _ = iid_local_loss_terms(Z, parts[i].labels, LocalLossContext(gamma=config.gamma), rate)
        state.initial.append(LossRow(0, i, terms.rc, terms.r, terms.dual, terms.penalty))
    state.consensus.append((0, max_pairwise_gap(own, nodes, classes)))

    def context(i, t_prev, duals_now):
        peer = {}
        for j in nbrs[i]:
            for k in classes:
                peer[(j, k)] = mailbox.read(i, j, k, t_prev).matrix
        return LocalLossContext(
            neighbors=nbrs[i],
            duals={(j, k): duals_now[(i, j, k)] for j in nbrs[i] for k in classes},
            self_prev={k: own[(i, k)] for k in classes},
            peer_prev=peer,
            gamma=config.gamma,
        )

    for t in range(1, config.rounds + 1):
        for i in nodes:
            for j in nbrs[i]:
                for k in classes:
                    duals[(i, j, k)] = dual_update(
                        duals[(i, j, k)], own[(i, k)], mailbox.read(i, j, k, t - 1).matrix, config.rho
                    )
        _audit_duals(state, duals, t)
        ctxs = {i: context(i, t - 1, duals) for i in nodes}
        if (t - 1) % config.grad_norm_every == 0:
            g2 = sum(_full_grad_norm_sq(params[i], parts[i].inputs, parts[i].labels, ctxs[i], rate) for i in nodes)
            state.grad_norms.append((t - 1, float(np.sqrt(g2))))

        rows = []
        for i in nodes:
            steps = config.steps_for(parts[i].m)
            local_round(params[i], adams[i], parts[i].inputs, parts[i].labels, ctxs[i], rate, steps, streams[i])
            Z = forward(params[i], parts[i].inputs)
            terms, _ = iid_local_loss_terms(Z, parts[i].labels, ctxs[i], rate)
            rows.append(LossRow(t, i, terms.rc, terms.r, terms.dual, terms.penalty))
            stats, dev = _stats_message(i, Z, parts[i].labels, t)
            state.trace_deviation = max(state.trace_deviation, dev)
            for s in stats:
                own[(i, s.klass)] = s.matrix
            mailbox.post(i, stats, nbrs[i])
        state.trajectory.append(rows)
        state.consensus.append((t, max_pairwise_gap(own, nodes, classes)))
        mailbox.prune(t - 1)
        if callback is not None:
            callback(t, state)
        if config.early_stop and _plateaued(state, config):
            log.info("early stop at round %d", t)
            break

    T = len(state.trajectory)
    if T and T % config.grad_norm_every == 0:
        tentative = {
            key: dual_update(Y, own[(key[0], key[2])], own[(key[1], key[2])], config.rho) for key, Y in duals.items()
        }
        g2 = 0.0
        for i in nodes:
            ctx = LocalLossContext(
                neighbors=nbrs[i],
                duals={(j, k): tentative[(i, j, k)] for j in nbrs[i] for k in classes},
                self_prev={k: own[(i, k)] for k in classes},
                peer_prev={(j, k): own[(j, k)] for j in nbrs[i] for k in classes},
                gamma=config.gamma,
            )
            g2 += _full_grad_norm_sq(params[i], parts[i].inputs, parts[i].labels, ctx, rate)
        state.grad_norms.append((T, float(np.sqrt(g2))))
    state.final_stats = dict(own)
    state.extra["classes"] = classes
    state.extra["total_m"] = total_m
    return state


def _audit_duals(state, duals, t):
    worst, total = 0.0, None
    for (i, j, k), Y in duals.items():
        other = duals.get((j, i, k))
        if other is not None:
            worst = max(worst, float(np.max(np.abs(Y + other))))
        total = Y.copy() if total is None else total + Y
    state.antisymmetry.append((t, worst))
    state.dual_sums.append((t, 0.0 if total is None else float(np.max(np.abs(total)))))


def _plateaued(state, config):
    w = config.early_stop_window
    if len(state.trajectory) <= w:
        return False
    now = np.mean([r.total for r in state.trajectory[-1]])
    then = np.mean([r.total for r in state.trajectory[-1 - w]])
    return abs(now - then) <= config.early_stop_tol * max(abs(then), 1e-12)


def run_centralized(dataset, config):
    """Pooled-data descent on ``-(R - R^c)`` with the same encoder and optimizer.

    Uses node 0's initialization and batch seeds, so a one-node ``run_iid``
    and this function see identical parameters and batches.
    """
    params, adam = make_node_params(config, dataset.n_features, 0)
    stream = batch_stream(dataset.labels, config.batch_size, batch_rng(config, 0))
    X, y = dataset.inputs, dataset.labels
    losses = [-mcr2_delta_dense(forward(params, X), y, config.eps_sq)]
    for _ in range(config.rounds):
        for _ in range(config.steps_for(dataset.m)):
            idx = next(stream)
            Xb, yb = X[:, idx], y[idx]
            Z, cache = forward(params, Xb, return_cache=True)
            adam_step(params, backward(params, Xb, mcr2_delta_grad(Z, yb, config.eps_sq), cache), adam)
        losses.append(-mcr2_delta_dense(forward(params, X), y, config.eps_sq))
    return params, np.array(losses)


def _softmax_xent(logits, y):
    shifted = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=0, keepdims=True)
    m = y.size
    loss = -float(np.mean(np.log(p[y, np.arange(m)] + 1e-300)))
    g = p.copy()
    g[y, np.arange(m)] -= 1.0
    return loss, g / m


def dsgd_embed(params, X):
    """Penultimate-layer activations of a D-SGD classifier, one column per sample."""
    _, cache = forward(params, X, normalize=False, return_cache=True)
    return cache["post"][-2]


def run_dsgd_baseline(parts, topology, config, n_classes=None, hidden_per_node=None):
    """Cross-entropy D-SGD; parameters are averaged only among same-architecture neighbors."""
    n = len(parts)
    nodes = list(range(n))
    if n_classes is None:
        n_classes = max(int(p.labels.max()) for p in parts) + 1
    params, streams, trajectory = {}, {}, []
    for i in nodes:
        hidden = config.hidden if hidden_per_node is None else hidden_per_node[i]
        arch = [parts[i].n_features, *hidden, config.out_dim, n_classes]
        seed = derive_seed(config.seed, "init") if config.same_init else derive_seed(config.seed, "dsgd", i)
        params[i] = init_params(arch, config.activation, seed)
        streams[i] = batch_stream(parts[i].labels, config.batch_size, batch_rng(config, i))
    byte_log = []
    for t in range(1, config.rounds + 1):
        rows = []
        for i in nodes:
            for _ in range(config.steps_for(parts[i].m)):
                idx = next(streams[i])
                Xb, yb = parts[i].inputs[:, idx], parts[i].labels[idx]
                logits, cache = forward(params[i], Xb, normalize=False, return_cache=True)
                _, g = _softmax_xent(logits, yb)
                for (W, b), (gW, gb) in zip(params[i].layers, backward(params[i], Xb, g, cache)):
                    W -= config.dsgd_lr * gW
                    b -= config.dsgd_lr * gb
        new = {}
        for i in nodes:
            group = [i] + [j for j in topology.neighbors(i) if params[j].arch == params[i].arch]
            byte_log.append((t, i, (len(group) - 1) * params[i].n_params() * 8))
            new[i] = average_params([params[j] for j in group]) if len(group) > 1 else params[i]
        params = new
        for i in nodes:
            logits = forward(params[i], parts[i].inputs, normalize=False)
            loss, _ = _softmax_xent(logits, parts[i].labels)
            rows.append(LossRow(t, i, loss, 0.0, 0.0, 0.0))
        trajectory.append(rows)
    state = TrainedState(params=params, trajectory=trajectory, kind="dsgd")
    # parameter traffic is not a GramStat, so it is logged here instead of a MailBox
    state.extra["param_byte_log"] = byte_log
    return state
