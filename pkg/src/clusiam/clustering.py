"""Density clustering with noise-score refinement.

Raw clusters come from DBSCAN on a cosine distance matrix. A second DBSCAN
pass at a tighter radius over-segments every raw cluster into sub-clusters;
sub-clusters whose mean distance to the rest of the cluster is at least the
cluster's own mean intra-distance are split off, and anything smaller than
``min_cluster_size`` is demoted to unlabeled. The surviving partition yields
the pseudo labels used to supervise training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

UNLABELED = -1


@dataclass
class ClusterAssignment:
    """Partition of dataset indices: per-index cluster id, or UNLABELED."""

    labels: np.ndarray  # (n,) int64, UNLABELED for noise
    n_clusters: int
    min_cluster_size: int = 1

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)

    def labeled_fraction(self) -> float:
        if self.labels.size == 0:
            return 0.0
        return float((self.labels != UNLABELED).sum()) / self.labels.size


@dataclass
class PseudoLabels:
    """Map from dataset index to refined cluster id; unlabeled indices absent."""

    mapping: dict[int, int]
    epoch: int
    n_clusters: int = field(default=0)

    def __post_init__(self):
        if self.mapping and self.n_clusters == 0:
            self.n_clusters = max(self.mapping.values()) + 1


def pairwise_distance(features: np.ndarray) -> np.ndarray:
    """Cosine distance matrix 1 - cos(a, b); symmetric, zero diagonal, in [0, 2]."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"expected an (n, D) feature matrix, got shape {features.shape}")
    norms = np.sqrt((features * features).sum(axis=1))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm feature row {int(zero[0])}")
    normalized = features / norms[:, None]
    sims = np.clip(normalized @ normalized.T, -1.0, 1.0)
    dist = 1.0 - sims
    dist = (dist + dist.T) / 2.0
    np.fill_diagonal(dist, 0.0)
    return dist


def dbscan(dist: np.ndarray, eps: float, min_pts: int) -> ClusterAssignment:
    """Deterministic DBSCAN over a precomputed distance matrix.

    A point is core iff it has at least ``min_pts`` neighbors within ``eps``
    (inclusive, counting itself). Clusters are connected components of core
    points, discovered in ascending index order; border points join the
    lowest-id cluster that has a core point within eps. Everything else is
    UNLABELED.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")
    n = dist.shape[0]
    labels = np.full(n, UNLABELED, dtype=np.int64)
    within = dist <= eps
    core = within.sum(axis=1) >= min_pts

    cluster_id = 0
    for start in range(n):
        if not core[start] or labels[start] != UNLABELED:
            continue
        queue = [start]
        labels[start] = cluster_id
        while queue:
            p = queue.pop(0)
            for q in np.flatnonzero(within[p]):
                if labels[q] != UNLABELED:
                    continue
                if core[q]:
                    labels[q] = cluster_id
                    queue.append(q)
        cluster_id += 1

    # border points: non-core within eps of some core; lowest cluster id wins
    for p in range(n):
        if labels[p] != UNLABELED or core[p]:
            continue
        neighbor_core = np.flatnonzero(within[p] & core)
        if neighbor_core.size:
            labels[p] = labels[neighbor_core].min()

    return ClusterAssignment(labels=labels, n_clusters=cluster_id, min_cluster_size=1)


def sub_cluster_score(sub: np.ndarray, cluster: np.ndarray, dist: np.ndarray) -> float:
    """Noise score of a sub-cluster relative to its parent cluster.

    Ratio of the mean distance from sub-cluster members to the rest of the
    cluster over the mean pairwise distance inside the whole cluster.
    Degenerate cases: sub == cluster -> 0 (keep); zero intra-distance with a
    positive numerator -> +inf (remove); both zero -> 0.
    """
    sub = np.asarray(sub, dtype=np.int64)
    cluster = np.asarray(cluster, dtype=np.int64)
    sub_set, cluster_set = set(sub.tolist()), set(cluster.tolist())
    if not sub_set <= cluster_set:
        raise ValueError("sub-cluster must be a subset of the cluster")
    if sub_set == cluster_set:
        return 0.0
    if cluster.size < 2:
        raise ValueError("cluster must contain at least 2 members")

    rest = np.array(sorted(cluster_set - sub_set), dtype=np.int64)
    d_sub = float(dist[np.ix_(sub, rest)].mean())
    iu = np.triu_indices(cluster.size, k=1)
    d_large = float(dist[np.ix_(cluster, cluster)][iu].mean())
    if d_large == 0.0:
        return float("inf") if d_sub > 0.0 else 0.0
    return d_sub / d_large


def refine(
    coarse: ClusterAssignment,
    fine: ClusterAssignment,
    dist: np.ndarray,
    rho_threshold: float = 1.0,
    min_cluster_size: int = 2,
) -> ClusterAssignment:
    """Split noisy sub-clusters out of each coarse cluster, then drop tiny ones.

    Sub-clusters are the fine partition restricted to each coarse cluster
    (fine-unlabeled members count as singletons). Each sub-cluster scoring
    at or above ``rho_threshold`` becomes its own cluster; afterwards every
    cluster smaller than ``min_cluster_size`` is demoted to UNLABELED.
    Resulting clusters are renumbered by ascending smallest member index.
    """
    n = coarse.labels.size
    groups: list[np.ndarray] = []
    for cid in range(coarse.n_clusters):
        members = coarse.members(cid)
        subs = _induced_sub_clusters(members, fine.labels)
        if len(subs) == 1:
            groups.append(members)
            continue
        kept: list[np.ndarray] = []
        for sub in subs:
            if sub_cluster_score(sub, members, dist) >= rho_threshold:
                groups.append(sub)
            else:
                kept.append(sub)
        if kept:
            groups.append(np.sort(np.concatenate(kept)))

    groups = [g for g in groups if g.size >= min_cluster_size]
    groups.sort(key=lambda g: int(g[0]))
    labels = np.full(n, UNLABELED, dtype=np.int64)
    for new_id, g in enumerate(groups):
        labels[g] = new_id
    return ClusterAssignment(labels=labels, n_clusters=len(groups), min_cluster_size=min_cluster_size)


def _induced_sub_clusters(members: np.ndarray, fine_labels: np.ndarray) -> list[np.ndarray]:
    subs: dict[int, list[int]] = {}
    singletons: list[np.ndarray] = []
    for idx in members:
        fl = int(fine_labels[idx])
        if fl == UNLABELED:
            singletons.append(np.array([idx], dtype=np.int64))
        else:
            subs.setdefault(fl, []).append(int(idx))
    out = [np.array(v, dtype=np.int64) for _, v in sorted(subs.items())]
    return out + singletons


def assign_pseudo_labels(refined: ClusterAssignment, epoch: int) -> PseudoLabels:
    mapping = {
        int(i): int(refined.labels[i])
        for i in np.flatnonzero(refined.labels != UNLABELED)
    }
    return PseudoLabels(mapping=mapping, epoch=epoch, n_clusters=refined.n_clusters)


def cluster_features(
    features: np.ndarray,
    eps: float,
    eps_fine: float,
    min_pts: int,
    min_cluster_size: int,
    refine_enabled: bool = True,
) -> ClusterAssignment:
    """Full pipeline: distances, raw DBSCAN, over-segmentation, refinement."""
    dist = pairwise_distance(features)
    coarse = dbscan(dist, eps, min_pts)
    if not refine_enabled:
        return coarse
    fine = dbscan(dist, eps_fine, min_pts)
    return refine(coarse, fine, dist, min_cluster_size=min_cluster_size)
