"""Scikit-learn-compatible wrappers around the two algorithmic cores.

These make the partitioner and the patch placer compose with sklearn
tooling (get_params/set_params, clone, pipelines over precomputed access
matrices).  The functional API in `partition` and `placement` stays the
primary surface; these classes just hold parameters and fitted state.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .partition import (
    build_bipartite_graph,
    hierarchical_partition,
    image_ownership,
)
from .placement import (
    CostCoefficients,
    hierarchical_place,
    intra_node_coefficients,
)
from .scene import SceneDataset
from .visibility import zorder_group


class VisibilityPartitioner(BaseEstimator):
    """Offline point placement as a clustering-style estimator.

    fit(dataset) groups the cloud by Z-order, builds the visibility graph
    and partitions it hierarchically; labels_ holds the flat GPU index per
    point group.
    """

    def __init__(self, machines=1, gpus_per_machine=1, group_size=2048,
                 eps=0.05, seed=0):
        self.machines = machines
        self.gpus_per_machine = gpus_per_machine
        self.group_size = group_size
        self.eps = eps
        self.seed = seed

    def fit(self, X: SceneDataset, y=None):
        self.grouped_ = zorder_group(X.cloud, self.group_size)
        self.graph_ = build_bipartite_graph(self.grouped_, X)
        self.assignment_ = hierarchical_partition(
            self.graph_, self.machines, self.gpus_per_machine,
            self.eps, self.seed,
        )
        self.labels_ = self.assignment_.flat_gpus()
        self.image_ownership_ = image_ownership(self.assignment_, self.graph_)
        return self

    def predict(self, group_ids) -> np.ndarray:
        """Flat GPU index for each group id."""
        check_is_fitted(self, "labels_")
        return self.labels_[np.asarray(group_ids, dtype=np.int64)]

    def fit_predict(self, X: SceneDataset, y=None) -> np.ndarray:
        return self.fit(X).labels_


class PatchPlacer(BaseEstimator):
    """Online patch-to-GPU assignment as a predict-shaped estimator.

    predict(A) maps a (B*P^2, N) access matrix to a GPU index per patch via
    LSA + local search, hierarchically when machines > 1.  There is no
    fitted state; fit() exists for pipeline compatibility.
    """

    def __init__(self, machines=1, gpus_per_machine=1,
                 alpha=1.0, beta=0.25, gamma=0.25, delta=0.5, p=2.0,
                 max_sweeps=200):
        self.machines = machines
        self.gpus_per_machine = gpus_per_machine
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.delta = delta
        self.p = p
        self.max_sweeps = max_sweeps

    def fit(self, X=None, y=None):
        self.n_gpus_ = self.machines * self.gpus_per_machine
        return self

    def predict(self, X) -> np.ndarray:
        matrix = np.asarray(X, dtype=np.int64)
        inter = CostCoefficients(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma,
            delta=self.delta, p=self.p,
        )
        sol = hierarchical_place(
            matrix, self.machines, self.gpus_per_machine,
            inter, intra_node_coefficients(self.p),
            max_sweeps=self.max_sweeps,
        )
        return sol.assignment

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).predict(X)
