"""scikit-learn style front end for decentralized rate-reduction training.

Rows are samples here, as sklearn expects; the trainers underneath use one
sample per column.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .clustering import cluster_with_replication
from .data import Dataset, PartitionSpec, enforce_proportions, partition
from .encoder import forward
from .evaluation import NearestSubspaceClassifier, global_encoding
from .iid import run_iid
from .network import build_topology, complete_topology
from .noniid import run_noniid
from .runner import node_encoders
from .training import TrainConfig, derive_seed


class DecentralizedMCR2(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Learn a shared feature map on a simulated network of nodes.

    With ``label_sets=None`` the training data is dealt out i.i.d. over
    ``n_nodes`` nodes connected by a random graph with edge probability ``p``
    and trained with parallel primal-dual rounds. With ``label_sets`` each node
    keeps only its labels, agents are clustered with local replication and
    trained cluster by cluster.

    ``transform`` returns the node-averaged, re-normalized features and
    ``predict`` applies a nearest-subspace classifier fitted on the training
    features.

    Examples
    --------
    >>> est = DecentralizedMCR2(n_nodes=2, out_dim=8, rounds=5)   # doctest: +SKIP
    >>> est.fit(X, y).transform(X).shape                          # doctest: +SKIP
    (n_samples, 8)
    """

    def __init__(
        self,
        n_nodes=4,
        p=0.5,
        label_sets=None,
        out_dim=16,
        hidden=(64,),
        rounds=100,
        lr=0.01,
        rho=0.1,
        gamma=1.0,
        eps_sq=0.5,
        batch_size=1000,
        local_epochs=5,
        energy=0.95,
        random_state=0,
    ):
        self.n_nodes = n_nodes
        self.p = p
        self.label_sets = label_sets
        self.out_dim = out_dim
        self.hidden = hidden
        self.rounds = rounds
        self.lr = lr
        self.rho = rho
        self.gamma = gamma
        self.eps_sq = eps_sq
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.energy = energy
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            rho=self.rho,
            gamma=self.gamma,
            lr=self.lr,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            eps_sq=self.eps_sq,
            out_dim=self.out_dim,
            hidden=tuple(self.hidden),
            seed=derive_seed(self.random_state, "train"),
        )

    def fit(self, X, y):
        X, y = validate_data(self, X, y)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        ds = Dataset(X.T, codes)
        n_classes = self.classes_.size
        seed = self.random_state
        if self.label_sets is None:
            parts = partition(ds, PartitionSpec("iid", self.n_nodes, seed=derive_seed(seed, "partition")))
            parts, _ = enforce_proportions(parts, "iid", n_classes=n_classes, seed=derive_seed(seed, "enforce"))
            n = len(parts)
            topo = complete_topology(n) if n < 3 else build_topology(n, self.p, derive_seed(seed, "topology"))
            self.state_ = run_iid(parts, topo, self._train_config())
            self.plan_ = None
        else:
            lookup = {c: i for i, c in enumerate(self.classes_)}
            sets = [sorted(lookup[c] for c in ls) for ls in self.label_sets]
            parts = partition(ds, PartitionSpec("by-labels", len(sets), sets, derive_seed(seed, "partition")))
            self.plan_ = cluster_with_replication(sets, range(n_classes))
            parts, _ = enforce_proportions(parts, "noniid", self.plan_, n_classes, derive_seed(seed, "enforce"))
            self.state_ = run_noniid(parts, self.plan_, self._train_config())
        self.encoders_ = node_encoders(self.state_)
        Z = self._encode(X)
        self.classifier_ = NearestSubspaceClassifier(energy=self.energy).fit(Z.T, codes)
        return self

    def _encode(self, X):
        return global_encoding([forward(p, X.T) for p in self.encoders_.values()])

    def _check(self, X):
        check_is_fitted(self, "encoders_")
        return validate_data(self, X, reset=False)

    def transform(self, X):
        return self._encode(self._check(X)).T

    def predict(self, X):
        Z = self.transform(X)
        return self.classes_[self.classifier_.predict(Z)]
