"""Geometry diagnostics and the nearest-subspace classifier.

Features are ``d x m`` with one sample per column, matching the trainers. The
sklearn-facing ``NearestSubspaceClassifier`` takes the usual ``n x d`` rows.
"""

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .errors import EmptyClass, ZeroVariance
from .linalg import singular_values

NORM_FLOOR = 1e-12


def _unit_columns(Z):
    Z = np.asarray(Z, dtype=np.float64)
    return Z / np.maximum(np.linalg.norm(Z, axis=0), NORM_FLOOR)


def label_order(labels):
    """Stable permutation that sorts samples by class."""
    return np.argsort(np.asarray(labels), kind="stable")


def cosine_similarity_matrix(Z, order=None):
    """Pairwise cosines of the (re-normalized) columns, optionally reordered."""
    U = _unit_columns(Z)
    if order is not None:
        U = U[:, order]
    C = U.T @ U
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def _class_columns(Z, labels):
    labels = np.asarray(labels)
    return {int(k): Z[:, labels == k] for k in np.unique(labels)}


def _max_between_cos(A, la, B, lb):
    # max |cos| over column pairs with different labels
    C = np.abs(_unit_columns(A).T @ _unit_columns(B))
    mask = np.asarray(la)[:, None] != np.asarray(lb)[None, :]
    return float(C[mask].max()) if mask.any() else 0.0


@dataclass
class Theorem1Report:
    within_node_max_cos: float
    across_node_max_cos: float
    effective_rank: Dict[int, int]
    top_spread: Dict[int, float]
    spectra: Dict[int, np.ndarray]
    orthogonal_within: bool
    orthogonal_across: bool
    diverse: bool

    @property
    def passed(self):
        return self.orthogonal_within and self.orthogonal_across and self.diverse

    def to_dict(self):
        return {
            "within_node_max_cos": self.within_node_max_cos,
            "across_node_max_cos": self.across_node_max_cos,
            "effective_rank": {str(k): v for k, v in self.effective_rank.items()},
            "top_spread": {str(k): v for k, v in self.top_spread.items()},
            "orthogonal_within": self.orthogonal_within,
            "orthogonal_across": self.orthogonal_across,
            "diverse": self.diverse,
            "passed": self.passed,
        }


def check_theorem1(Z_per_node, labels_per_node, tol_orth=0.2, tol_spec=0.1, class_dims=None, max_spread=2.0):
    """Orthogonality and within-class diversity of trained features.

    Between-class |cos| is measured inside every node and across every node
    pair. Per class, the pooled spectrum gives the effective rank (singular
    values above ``tol_spec * sigma_1``) and the max/min spread of the top
    ``d_k - 1`` values. ``class_dims`` maps class to d_k (an int applies to all
    classes); without it the diversity property only requires rank >= 1.
    """
    Zs = [np.asarray(Z, dtype=np.float64) for Z in Z_per_node]
    Ls = [np.asarray(lab) for lab in labels_per_node]
    within = max((_max_between_cos(Z, lab, Z, lab) for Z, lab in zip(Zs, Ls)), default=0.0)
    across = 0.0
    for a, b in combinations(range(len(Zs)), 2):
        across = max(across, _max_between_cos(Zs[a], Ls[a], Zs[b], Ls[b]))

    pooled = _class_columns(np.concatenate(Zs, axis=1), np.concatenate(Ls))
    ranks, spreads, spectra = {}, {}, {}
    diverse = True
    for k, Zk in pooled.items():
        sv = singular_values(Zk)
        spectra[k] = sv
        ranks[k] = int(np.sum(sv > tol_spec * sv[0])) if sv[0] > 0 else 0
        dk = class_dims.get(k) if isinstance(class_dims, dict) else class_dims
        top = max(1, (dk or 2) - 1)
        head = sv[:top]
        spreads[k] = float(head[0] / head[-1]) if head[-1] > 0 else float("inf")
        if ranks[k] < top or (dk is not None and spreads[k] >= max_spread):
            diverse = False
    return Theorem1Report(
        within_node_max_cos=within,
        across_node_max_cos=across,
        effective_rank=ranks,
        top_spread=spreads,
        spectra=spectra,
        orthogonal_within=within < tol_orth,
        orthogonal_across=across < tol_orth,
        diverse=diverse,
    )


@dataclass
class SubspaceModel:
    classes: List[int]
    means: Dict[int, np.ndarray]
    bases: Dict[int, np.ndarray]

    @property
    def ranks(self):
        return {k: B.shape[1] for k, B in self.bases.items()}


def _energy_rank(values, energy):
    vals = np.clip(values, 0.0, None)
    total = vals.sum()
    if total <= 0:
        return 1
    frac = np.cumsum(vals) / total
    # a tiny slack absorbs rounding when the energy is reached exactly
    return int(min(np.searchsorted(frac, energy - 1e-12) + 1, vals.size))


def fit_subspace_model(Z, labels, energy=0.95, n_classes=None, rank=None):
    """Per-class mean and principal basis of the centered class scatter.

    ``r_k`` is the smallest rank whose eigenvalues hold at least ``energy`` of
    the class's spectral energy, unless ``rank`` fixes it for every class
    (``rank=0`` reduces the classifier to nearest class mean).
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    classes = list(range(n_classes)) if n_classes is not None else [int(k) for k in np.unique(labels)]
    means, bases = {}, {}
    for k in classes:
        Zk = Z[:, labels == k]
        if Zk.shape[1] == 0:
            raise EmptyClass(f"class {k} has no training samples")
        mu = Zk.mean(axis=1)
        C = Zk - mu[:, None]
        vals, vecs = np.linalg.eigh(C @ C.T)
        vals, vecs = vals[::-1], vecs[:, ::-1]
        r = _energy_rank(vals, energy) if rank is None else int(rank)
        means[k] = mu
        bases[k] = vecs[:, :r]
    return SubspaceModel(classes=classes, means=means, bases=bases)


def subspace_residuals(model, Z):
    """``K x m`` table of squared residuals ``||(I - Phi Phi^T)(z - mu_k)||^2``."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    out = np.empty((len(model.classes), Z.shape[1]))
    for row, k in enumerate(model.classes):
        D = Z - model.means[k][:, None]
        B = model.bases[k]
        P = D - B @ (B.T @ D)
        out[row] = np.sum(P * P, axis=0)
    return out


def nearest_subspace_classify(model, z):
    """Class with the smallest residual; ``argmin`` keeps the lowest class id on ties."""
    res = subspace_residuals(model, z)
    pred = np.asarray(model.classes)[np.argmin(res, axis=0)]
    return int(pred[0]) if np.ndim(z) == 1 else pred


def _scatter_traces(Z, labels):
    Z = np.asarray(Z, dtype=np.float64)
    mu = Z.mean(axis=1, keepdims=True)
    total = float(np.sum((Z - mu) ** 2))
    within = between = 0.0
    for Zk in _class_columns(Z, labels).values():
        muk = Zk.mean(axis=1, keepdims=True)
        within += float(np.sum((Zk - muk) ** 2))
        between += Zk.shape[1] * float(np.sum((muk - mu) ** 2))
    return within, between, total


def wccr(Z, labels):
    """Within-class share of the total scatter, ``tr(S_W) / tr(S_T)``."""
    if np.asarray(Z).shape[1] < 2:
        raise ValueError("need at least two samples")
    within, _, total = _scatter_traces(Z, labels)
    if total < 1e-12:
        raise ZeroVariance("total scatter is zero")
    return min(max(within / total, 0.0), 1.0)


def _class_means(Z, labels):
    return {k: Zk.mean(axis=1) for k, Zk in _class_columns(np.asarray(Z, dtype=np.float64), labels).items()}


def iidr(Z, labels):
    """Mean distance between class means over mean distance of samples to their class mean."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    means = _class_means(Z, labels)
    if len(means) < 2:
        raise ValueError("need at least two classes")
    keys = sorted(means)
    inter = np.mean([np.linalg.norm(means[a] - means[b]) for a, b in combinations(keys, 2)])
    M = np.stack([means[int(k)] for k in labels], axis=1)
    intra = float(np.mean(np.linalg.norm(Z - M, axis=0)))
    if intra < NORM_FLOOR:
        return float("inf")
    return float(inter / intra)


def linear_cka(Z_a, Z_b):
    """Linear CKA between two encodings of the same samples."""
    A = np.asarray(Z_a, dtype=np.float64)
    B = np.asarray(Z_b, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError("both encodings must cover the same samples")
    A = A - A.mean(axis=1, keepdims=True)
    B = B - B.mean(axis=1, keepdims=True)
    na = np.linalg.norm(A @ A.T)
    nb = np.linalg.norm(B @ B.T)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroVariance("constant encoding")
    return float(np.linalg.norm(A @ B.T) ** 2 / (na * nb))


def class_mean_cosine_stats(Z, labels):
    """Cosine matrix of class means with the mean and std of its off-diagonal."""
    means = _class_means(Z, labels)
    if len(means) < 2:
        raise ValueError("need at least two classes")
    keys = sorted(means)
    M = np.stack([means[k] for k in keys], axis=1)
    norms = np.linalg.norm(M, axis=0)
    if np.any(norms < NORM_FLOOR):
        raise ZeroVariance("a class mean is the zero vector")
    U = M / norms
    C = U.T @ U
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    off = C[np.triu_indices(len(keys), 1)]
    return C, float(off.mean()), float(off.std())


@dataclass
class GeometryReport:
    class_mean_cos: np.ndarray
    offdiag_mean: float
    offdiag_std: float
    wccr: float
    iidr: float
    cka: Dict[str, float] = field(default_factory=dict)
    spectra: Dict[str, np.ndarray] = field(default_factory=dict)
    theorem1: dict = field(default_factory=dict)
    accuracy: float = None

    def to_dict(self):
        return {
            "class_mean_cos": self.class_mean_cos.tolist(),
            "offdiag_mean": self.offdiag_mean,
            "offdiag_std": self.offdiag_std,
            "wccr": self.wccr,
            "iidr": self.iidr if np.isfinite(self.iidr) else "inf",
            "cka": dict(self.cka),
            "theorem1": self.theorem1,
            "accuracy": self.accuracy,
        }


def global_encoding(per_node):
    """Average of per-node encodings of the same samples, columns re-normalized."""
    return _unit_columns(np.mean(np.stack(list(per_node)), axis=0))


def geometry_report(per_node, labels, class_dims=None, tol_orth=0.2, tol_spec=0.1):
    """Every diagnostic for one evaluation set encoded by each node.

    ``per_node`` maps node id to its ``d x m`` encoding of the shared samples.
    """
    names = list(per_node)
    Z = global_encoding(per_node[n] for n in names)
    C, mean, std = class_mean_cosine_stats(Z, labels)
    cka = {}
    for a, b in combinations(names, 2):
        cka[f"{a}|{b}"] = linear_cka(per_node[a], per_node[b])
    spectra = {"all": singular_values(Z)}
    for k, Zk in _class_columns(Z, labels).items():
        spectra[str(k)] = singular_values(Zk)
    th = check_theorem1([per_node[n] for n in names], [labels] * len(names), tol_orth, tol_spec, class_dims)
    return GeometryReport(
        class_mean_cos=C,
        offdiag_mean=mean,
        offdiag_std=std,
        wccr=wccr(Z, labels),
        iidr=iidr(Z, labels),
        cka=cka,
        spectra=spectra,
        theorem1=th.to_dict(),
    )


class NearestSubspaceClassifier(ClassifierMixin, BaseEstimator):
    """Nearest class subspace on mean-centered features; rows are samples.

    Parameters
    ----------
    energy : float
        Spectral energy each class basis must retain.
    rank : int or None
        Fixed basis rank for every class; overrides ``energy``.
    """

    def __init__(self, energy=0.95, rank=None):
        self.energy = energy
        self.rank = rank

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        # in very low dimensions every class basis spans the space and residuals vanish
        tags.classifier_tags.poor_score = True
        return tags

    def fit(self, X, y):
        X, y = validate_data(self, X, y)
        check_classification_targets(y)
        if not 0 < self.energy <= 1:
            raise ValueError("energy must lie in (0, 1]")
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.model_ = fit_subspace_model(X.T, codes, self.energy, n_classes=len(self.classes_), rank=self.rank)
        return self

    def decision_function(self, X):
        """Negative squared residuals; for two classes, the usual 1-D margin of class 1."""
        check_is_fitted(self)
        X = validate_data(self, X, reset=False)
        scores = -subspace_residuals(self.model_, X.T).T
        if len(self.classes_) == 2:
            return scores[:, 1] - scores[:, 0]
        return scores

    def predict(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            # ties go to the lower class, as in nearest_subspace_classify
            return self.classes_[(scores > 0).astype(int)]
        return self.classes_[np.argmax(scores, axis=1)]


def _diverging(v):
    # -1 -> blue, 0 -> white, 1 -> red
    v = float(np.clip(v, -1.0, 1.0))
    if v >= 0:
        r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
    else:
        r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def write_heatmap_svg(C, path, max_cells=None, cell=4):
    """Rect-grid SVG of a square matrix, one cell per entry.

    With ``max_cells`` set, larger matrices are block-averaged down to that size.
    """
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    if max_cells is not None and n > max_cells:
        edges = np.linspace(0, n, max_cells + 1).astype(int)
        C = np.array([[C[a:b, c:e].mean() for c, e in zip(edges[:-1], edges[1:])] for a, b in zip(edges[:-1], edges[1:])])
        n = max_cells
    size = n * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">']
    for i in range(n):
        for j in range(n):
            parts.append(
                f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" fill="{_diverging(C[i, j])}"/>'
            )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))

