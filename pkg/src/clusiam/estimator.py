"""scikit-learn style wrappers around the training loop and the clusterer.

``ContrastiveReidEncoder`` is an unsupervised transformer: ``fit`` on a
batch of images, ``transform`` to embeddings. ``RefinedDbscan`` is a
clusterer over feature rows with the usual ``fit`` / ``fit_predict``
surface. Both compose with sklearn pipelines and expose ``get_params`` /
``set_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import clustering, model as model_mod
from .dataset import ImageSample, ReidDataset
from .trainer import TrainConfig, train
from .validation import check_features, check_images


class RefinedDbscan(ClusterMixin, BaseEstimator):
    """DBSCAN on cosine distances with over-segmentation refinement.

    Parameters mirror the clustering pipeline: ``eps`` is the coarse
    radius, ``eps_fine`` the tighter radius used to expose sub-clusters,
    ``min_pts`` the core-point threshold (self-counting), and clusters
    smaller than ``min_cluster_size`` end up labeled -1.
    """

    def __init__(self, eps=0.6, eps_fine=0.58, min_pts=4, min_cluster_size=2, refine=True):
        self.eps = eps
        self.eps_fine = eps_fine
        self.min_pts = min_pts
        self.min_cluster_size = min_cluster_size
        self.refine = refine

    def fit(self, X, y=None):
        X = check_features(X)
        assignment = clustering.cluster_features(
            X,
            eps=self.eps,
            eps_fine=self.eps_fine,
            min_pts=self.min_pts,
            min_cluster_size=self.min_cluster_size,
            refine_enabled=self.refine,
        )
        self.labels_ = assignment.labels
        self.n_clusters_ = assignment.n_clusters
        return self


class ContrastiveReidEncoder(TransformerMixin, BaseEstimator):
    """Unsupervised image embedder trained with cluster-guided contrastive losses.

    ``fit(X)`` treats every image in X as unlabeled training data and runs
    the full training loop; ``transform(X)`` embeds images with the first
    branch. Pass a tagged :class:`ReidDataset` via ``fit(dataset=...)`` to
    enable per-epoch retrieval evaluation and best-model tracking.
    """

    def __init__(
        self,
        epochs=30,
        batch_size=64,
        lr=0.00035,
        weight_decay=0.0005,
        tau=0.05,
        bank_momentum=0.2,
        cluster_eps=0.6,
        cluster_eps_fine=0.58,
        cluster_min_pts=4,
        min_cluster_size=2,
        refine=True,
        embed_dim=64,
        hidden_dims=(256,),
        mode="asymmetric",
        stop_grad=True,
        view="gray",
        seed=0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.tau = tau
        self.bank_momentum = bank_momentum
        self.cluster_eps = cluster_eps
        self.cluster_eps_fine = cluster_eps_fine
        self.cluster_min_pts = cluster_min_pts
        self.min_cluster_size = min_cluster_size
        self.refine = refine
        self.embed_dim = embed_dim
        self.hidden_dims = hidden_dims
        self.mode = mode
        self.stop_grad = stop_grad
        self.view = view
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            tau=self.tau,
            bank_momentum=self.bank_momentum,
            cluster_eps=self.cluster_eps,
            cluster_eps_fine=self.cluster_eps_fine,
            cluster_min_pts=self.cluster_min_pts,
            min_cluster_size=self.min_cluster_size,
            refine=self.refine,
            embed_dim=self.embed_dim,
            hidden_dims=tuple(self.hidden_dims),
            mode=self.mode,
            stop_grad=self.stop_grad,
            view=self.view,
            seed=self.seed,
        )

    def fit(self, X=None, y=None, dataset: ReidDataset | None = None):
        if dataset is None:
            X = check_images(X)
            samples = [ImageSample(image=im, identity=-1, camera=-1) for im in X]
            dataset = ReidDataset(samples=samples, train_indices=list(range(len(samples))))
        self.state_ = train(self._config(), dataset)
        self.model_ = self.state_.best_model or self.state_.model
        self.history_ = self.state_.history
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the encoder before calling transform")
        X = check_images(X)
        return model_mod.encode(X, self.model_.encoder1)
