"""Coding-rate objectives and the node-local augmented Lagrangians.

Feature matrices are ``d x m`` with one sample per column. Every function takes
``eps_sq`` (the squared precision) and, where the weights need it, the global
sample count ``total_m``. Gradients are analytic; each log-determinant term is
differentiated with a single Cholesky solve.
"""

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Tuple

import numpy as np

from .errors import EmptyClass, MissingStat
from .linalg import logdet_and_solve, logdet_psd


@dataclass(frozen=True)
class RateParams:
    eps_sq: float
    total_m: int

    def __post_init__(self):
        if not self.eps_sq > 0:
            raise ValueError("eps_sq must be positive")
        if self.total_m <= 0:
            raise ValueError("total_m must be positive")

    def precision_ok(self, class_counts, d, class_dims):
        """High-precision condition eps^4 < min_k (m_k/m) (d/d_k)^2."""
        bound = min(
            (class_counts[k] / self.total_m) * (d / class_dims[k]) ** 2 for k in class_counts
        )
        return self.eps_sq ** 2 < bound


@dataclass
class LossTerms:
    """Components of a local augmented Lagrangian, summed into ``total``."""

    rc: float = 0.0
    r: float = 0.0
    dual: float = 0.0
    penalty: float = 0.0

    @property
    def total(self):
        return self.rc - self.r + self.dual + self.penalty


def _split_classes(labels, classes=None):
    labels = np.asarray(labels)
    if classes is None:
        classes = np.unique(labels)
    return {int(k): np.flatnonzero(labels == k) for k in classes}


def coding_rate(Z, eps_sq, m_eff):
    """``1/2 logdet(I + d/(m_eff eps^2) Z Z^T)``."""
    Z = np.asarray(Z, dtype=np.float64)
    d = Z.shape[0]
    return 0.5 * logdet_psd((d / (m_eff * eps_sq)) * (Z @ Z.T), 1.0)


def class_coding_rate(Z, labels, eps_sq, total_m=None, n_classes=None):
    """Class-conditional rate ``sum_k m_k/(2m) logdet(I + d/(m_k eps^2) Z_k Z_k^T)``."""
    Z = np.asarray(Z, dtype=np.float64)
    d, m = Z.shape
    total_m = m if total_m is None else total_m
    classes = range(n_classes) if n_classes is not None else None
    out = 0.0
    for k, idx in _split_classes(labels, classes).items():
        if idx.size == 0:
            raise EmptyClass(f"class {k} has no samples")
        Zk = Z[:, idx]
        mk = idx.size
        out += mk / (2.0 * total_m) * logdet_psd((d / (mk * eps_sq)) * (Zk @ Zk.T), 1.0)
    return out


def mcr2_delta(Z, labels, eps_sq, total_m=None, n_classes=None):
    """Rate reduction ``R(Z) - R^c(Z | labels)``."""
    m = np.asarray(Z).shape[1] if total_m is None else total_m
    return coding_rate(Z, eps_sq, m) - class_coding_rate(Z, labels, eps_sq, m, n_classes)


def mcr2_delta_grad(Z, labels, eps_sq):
    """Gradient of ``-(R - R^c)`` via dense membership matrices.

    Deliberately written with explicit diagonal Pi_k and LU solves so it stays
    independent of the Cholesky path used by the node-local losses.
    """
    Z = np.asarray(Z, dtype=np.float64)
    d, m = Z.shape
    labels = np.asarray(labels)
    eye = np.eye(d)
    A = eye + (d / (m * eps_sq)) * Z @ Z.T
    grad = -(d / (m * eps_sq)) * np.linalg.solve(A, Z)
    for k in np.unique(labels):
        Pi = np.diag((labels == k).astype(np.float64))
        tr = np.trace(Pi)
        ck = d / (tr * eps_sq)
        Ak = eye + ck * Z @ Pi @ Z.T
        grad += (tr / m) * ck * np.linalg.solve(Ak, Z @ Pi)
    return grad


def mcr2_delta_dense(Z, labels, eps_sq):
    """``R - R^c`` through the same dense Pi route (slogdet)."""
    Z = np.asarray(Z, dtype=np.float64)
    d, m = Z.shape
    labels = np.asarray(labels)
    eye = np.eye(d)
    r = 0.5 * np.linalg.slogdet(eye + (d / (m * eps_sq)) * Z @ Z.T)[1]
    rc = 0.0
    for k in np.unique(labels):
        Pi = np.diag((labels == k).astype(np.float64))
        tr = np.trace(Pi)
        rc += tr / (2 * m) * np.linalg.slogdet(eye + d / (tr * eps_sq) * Z @ Pi @ Z.T)[1]
    return r - rc


def local_rates(Z_i, labels_i, eps_sq, total_m):
    """Node-local ``(R_i, R_i^c)`` weighted by the GLOBAL sample count."""
    Z_i = np.asarray(Z_i, dtype=np.float64)
    m_i = Z_i.shape[1]
    r = (m_i / total_m) * coding_rate(Z_i, eps_sq, m_i)
    rc = class_coding_rate(Z_i, labels_i, eps_sq, total_m)
    return r, rc


def _rate_term(Zk, eps_sq, total_m, want_grad):
    # (m_k/2m) logdet(I + d/(m_k eps^2) Zk Zk^T) and its gradient (d/(m eps^2)) A^{-1} Zk
    d, mk = Zk.shape
    c = d / (mk * eps_sq)
    if not want_grad:
        return mk / (2.0 * total_m) * logdet_psd(c * (Zk @ Zk.T), 1.0), None
    ld, sol = logdet_and_solve(c * (Zk @ Zk.T), 1.0, Zk)
    return mk / (2.0 * total_m) * ld, (d / (total_m * eps_sq)) * sol


@dataclass
class LocalLossContext:
    """Everything node i needs from round t-1 to evaluate its local loss.

    ``duals`` maps (peer, class) to Y_{i,j,k}; ``self_prev`` maps class to the
    node's own V_{i,k}^{(t-1)}; ``peer_prev`` maps (peer, class) to V_{j,k}^{(t-1)}.
    """

    neighbors: List[Hashable] = field(default_factory=list)
    duals: Dict[Tuple[Hashable, int], np.ndarray] = field(default_factory=dict)
    self_prev: Dict[int, np.ndarray] = field(default_factory=dict)
    peer_prev: Dict[Tuple[Hashable, int], np.ndarray] = field(default_factory=dict)
    gamma: float = 0.0


def _consensus_terms(Zk, k, peers, duals, self_prev, peer_prev, gamma, terms, want_grad):
    """Dual trace and penalty terms for one class against a list of peers."""
    d, mk = Zk.shape
    G = (Zk @ Zk.T) / mk
    acc = np.zeros((d, d)) if want_grad else None
    if not peers:
        return acc
    if gamma and k not in self_prev:
        raise MissingStat("self", k)
    for j in peers:
        if (j, k) not in peer_prev:
            raise MissingStat(j, k)
        if (j, k) not in duals:
            raise MissingStat(j, ("dual", k))
        Vj = peer_prev[(j, k)]
        Y = duals[(j, k)]
        terms.dual += float(np.sum(Y * (G - Vj)))
        if want_grad:
            acc += Y + Y.T
        if gamma:
            D = G - 0.5 * (self_prev[k] + Vj)
            terms.penalty += gamma * float(np.sum(D * D))
            if want_grad:
                acc += 4.0 * gamma * D
    return acc


def iid_local_loss_terms(Z_i, labels_i, ctx, params, want_grad=False):
    """Local augmented Lagrangian for i.i.d. partitions, with optional gradient.

    Class counts are taken from ``labels_i`` (the batch), the rate weights from
    ``params.total_m``. Returns ``(LossTerms, grad or None)``.
    """
    Z_i = np.asarray(Z_i, dtype=np.float64)
    eps_sq, total_m = params.eps_sq, params.total_m
    terms = LossTerms()
    grad = np.zeros_like(Z_i) if want_grad else None

    r, g = _rate_term(Z_i, eps_sq, total_m, want_grad)
    terms.r = r
    if want_grad:
        grad -= g
    for k, idx in _split_classes(labels_i).items():
        Zk = Z_i[:, idx]
        rck, gk = _rate_term(Zk, eps_sq, total_m, want_grad)
        terms.rc += rck
        acc = _consensus_terms(
            Zk, k, ctx.neighbors, ctx.duals, ctx.self_prev, ctx.peer_prev, ctx.gamma, terms, want_grad
        )
        if want_grad:
            grad[:, idx] += gk + (acc @ Zk) / idx.size
    return terms, grad


def iid_local_loss(Z_i, labels_i, ctx, params):
    return iid_local_loss_terms(Z_i, labels_i, ctx, params)[0].total


def iid_local_loss_grad(Z_i, labels_i, ctx, params):
    return iid_local_loss_terms(Z_i, labels_i, ctx, params, want_grad=True)[1]


@dataclass
class ClusterLossContext:
    """State node i sees inside cluster s during one BCD step.

    peer_grams
        node -> (1/S_j) Z_j Z_j^T restricted to the classes j does NOT share
        with i (the intra-cluster payload), fresh or stale per the schedule.
    shared
        class -> list of (peer, m_{j,k}, S_j) for cluster peers holding the
        same class as i.
    label_peers
        class -> peers across all clusters holding that class (duals/penalty).
    other_class_grams
        optional class -> sum_j (1/S_j) Z_{j,k} Z_{j,k}^T for cluster classes
        i does not hold; only used for the constant part of the reported loss.
    """

    node: Hashable
    s_self: int
    cluster_m: float
    class_cluster_m: Dict[int, float]
    full_counts: Dict[int, int]
    peer_grams: Dict[Hashable, np.ndarray] = field(default_factory=dict)
    shared: Dict[int, List[Tuple[Hashable, int, int]]] = field(default_factory=dict)
    label_peers: Dict[int, List[Hashable]] = field(default_factory=dict)
    duals: Dict[Tuple[Hashable, int], np.ndarray] = field(default_factory=dict)
    self_prev: Dict[int, np.ndarray] = field(default_factory=dict)
    peer_prev: Dict[Tuple[Hashable, int], np.ndarray] = field(default_factory=dict)
    other_class_grams: Optional[Dict[int, np.ndarray]] = None
    gamma: float = 0.0
    substitute: bool = True
    compression_weight: str = "inner"


def cluster_loss_terms(Z_i, labels_i, ctx, params, want_grad=False):
    """Node i's view of the cluster loss under block coordinate descent.

    Batch class Grams are rescaled by m_{i,k}/m'_{i,k} so they estimate the
    full-data Grams the peers transmit. With ``ctx.substitute`` the peer Gram of
    every shared class is replaced by ``m_{j,k}/(S_j m_{i,k})`` times node i's
    own class Gram in both the expansion and the compression term; otherwise
    the peer's stale label-wise stat ``(m_{j,k}/S_j) V_{j,k}`` is used.
    """
    Z_i = np.asarray(Z_i, dtype=np.float64)
    d = Z_i.shape[0]
    eps_sq, total_m = params.eps_sq, params.total_m
    terms = LossTerms()
    grad = np.zeros_like(Z_i) if want_grad else None
    if ctx.compression_weight not in ("inner", "node"):
        raise ValueError(f"unknown compression_weight {ctx.compression_weight!r}")

    groups = _split_classes(labels_i)
    beta, scale, own_grams = {}, {}, {}
    peer_fixed = np.zeros((d, d))
    for j, W in ctx.peer_grams.items():
        peer_fixed += W
    class_fixed = {}
    for k, idx in groups.items():
        if k not in ctx.full_counts:
            raise MissingStat(ctx.node, ("count", k))
        m_ik = ctx.full_counts[k]
        Zk = Z_i[:, idx]
        scale[k] = m_ik / idx.size
        own_grams[k] = scale[k] * (Zk @ Zk.T)
        b = 1.0 / ctx.s_self
        fixed = np.zeros((d, d))
        for j, m_jk, s_j in ctx.shared.get(k, []):
            if ctx.substitute:
                b += m_jk / (s_j * m_ik)
            else:
                if (j, k) not in ctx.peer_prev:
                    raise MissingStat(j, k)
                fixed += (m_jk / s_j) * ctx.peer_prev[(j, k)]
        beta[k] = b
        class_fixed[k] = fixed
        peer_fixed += fixed

    # expansion: -(m^s/2m) logdet(I + d/(m^s eps^2) G)
    m_s = float(ctx.cluster_m)
    c = d / (m_s * eps_sq)
    G = peer_fixed + sum(beta[k] * own_grams[k] for k in groups)
    if want_grad:
        ld, sol = logdet_and_solve(c * G, 1.0, Z_i)
    else:
        ld, sol = logdet_psd(c * G, 1.0), None
    terms.r = m_s / (2.0 * total_m) * ld
    if want_grad:
        for k, idx in groups.items():
            grad[:, idx] -= (d / (total_m * eps_sq)) * beta[k] * scale[k] * sol[:, idx]

    # compression over the classes in this cluster
    node_div = ctx.s_self if ctx.compression_weight == "node" else 1
    for k, m_ks in ctx.class_cluster_m.items():
        m_ks = float(m_ks)
        ck = d / (m_ks * eps_sq)
        weight = m_ks / (total_m * node_div)
        if k in groups:
            idx = groups[k]
            Gk = class_fixed[k] + beta[k] * own_grams[k]
            Zk = Z_i[:, idx]
            if want_grad:
                ldk, solk = logdet_and_solve(ck * Gk, 1.0, Zk)
                grad[:, idx] += weight * ck * beta[k] * scale[k] * solk
            else:
                ldk = logdet_psd(ck * Gk, 1.0)
            terms.rc += 0.5 * weight * ldk
        elif ctx.other_class_grams is not None:
            if k not in ctx.other_class_grams:
                raise MissingStat("cluster", ("class_gram", k))
            terms.rc += 0.5 * weight * logdet_psd(ck * ctx.other_class_grams[k], 1.0)

    for k, idx in groups.items():
        Zk = Z_i[:, idx]
        acc = _consensus_terms(
            Zk,
            k,
            ctx.label_peers.get(k, []),
            ctx.duals,
            ctx.self_prev,
            ctx.peer_prev,
            ctx.gamma,
            terms,
            want_grad,
        )
        if want_grad:
            grad[:, idx] += (acc @ Zk) / idx.size
    return terms, grad


def cluster_loss(Z_i, labels_i, ctx, params):
    return cluster_loss_terms(Z_i, labels_i, ctx, params)[0].total


def cluster_loss_grad(Z_i, labels_i, ctx, params):
    return cluster_loss_terms(Z_i, labels_i, ctx, params, want_grad=True)[1]
