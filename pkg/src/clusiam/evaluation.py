"""Retrieval metrics: mean average precision and CMC at ranks 1/5/10.

Standard cross-camera protocol: for each query, gallery entries sharing both
the query's identity and camera are excluded, the rest are ranked by cosine
similarity, and a gallery entry is relevant iff it shares the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RetrievalSet:
    features: np.ndarray  # (n, D)
    identities: np.ndarray  # (n,)
    cameras: np.ndarray  # (n,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        n = self.features.shape[0]
        if self.identities.shape != (n,) or self.cameras.shape != (n,):
            raise ValueError("identity/camera arrays must align with feature rows")


@dataclass
class EvalResult:
    mean_ap: float
    cmc1: float
    cmc5: float
    cmc10: float
    ap_per_query: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "cmc1": self.cmc1,
            "cmc5": self.cmc5,
            "cmc10": self.cmc10,
        }


def _normalize(rows: np.ndarray) -> np.ndarray:
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm feature row {int(zero[0])}")
    return rows / norms


def rank_gallery(
    feature: np.ndarray, identity: int, camera: int, gallery: RetrievalSet
) -> np.ndarray:
    """Gallery indices by descending cosine similarity, ties broken by index.

    Entries sharing both the query identity and camera are excluded
    entirely (they would be trivial same-view matches).
    """
    keep = ~((gallery.identities == identity) & (gallery.cameras == camera))
    valid = np.flatnonzero(keep)
    if valid.size == 0:
        raise ValueError("no valid gallery entries remain after same-id/same-camera exclusion")
    f = np.asarray(feature, dtype=np.float64)
    fn = f / np.sqrt((f * f).sum())
    gn = _normalize(gallery.features[valid])
    sims = gn @ fn
    order = np.argsort(-sims, kind="stable")
    return valid[order]


def average_precision(relevance) -> float:
    """AP = (1/R) * sum of precision@k over relevant positions k."""
    rel = np.asarray(relevance, dtype=bool)
    r = int(rel.sum())
    if r == 0:
        raise ValueError("average_precision requires at least one relevant entry")
    hits = np.cumsum(rel)
    ks = np.flatnonzero(rel) + 1
    return float((hits[ks - 1] / ks).sum() / r)


def evaluate(query: RetrievalSet, gallery: RetrievalSet) -> EvalResult:
    """Mean AP over queries plus CMC at ranks 1/5/10."""
    aps: list[float] = []
    first_hit_ranks: list[int] = []
    for i in range(query.features.shape[0]):
        ranked = rank_gallery(
            query.features[i], int(query.identities[i]), int(query.cameras[i]), gallery
        )
        rel = gallery.identities[ranked] == query.identities[i]
        aps.append(average_precision(rel))
        first_hit_ranks.append(int(np.flatnonzero(rel)[0]) + 1)
    ranks = np.asarray(first_hit_ranks)
    return EvalResult(
        mean_ap=float(np.mean(aps)),
        cmc1=float((ranks <= 1).mean()),
        cmc5=float((ranks <= 5).mean()),
        cmc10=float((ranks <= 10).mean()),
        ap_per_query=aps,
    )
