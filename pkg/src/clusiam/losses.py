"""Memory banks, cluster centers, and the contrastive loss terms.

Three losses drive training:

* instance alignment: negative cosine between the predictor output of the
  first branch and the matching feature of the second branch (which is
  detached by default, so the second branch receives no gradient from it);
* cross-view center alignment: negative cosine between the predictor output
  and the second branch's cluster center for the sample's pseudo label;
* within-view center assignment: a focal-weighted softmax term per branch,
  -(1 - q)^2 ln q, where q is the temperature softmax of feature/center
  inner products at the sample's pseudo label.

Cluster centers are means of memory-bank rows and enter every loss as
constants: no gradient ever reaches the banks. In asymmetric mode the only
gradient path into the second branch is its own within-view assignment term.
Symmetric mode adds a second predictor with mirrored instance/cross-view
terms that (under stop-gradient) update only the second branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .clustering import UNLABELED, PseudoLabels

LN_Q_FLOOR = np.log(1e-12)  # softmax probabilities are clamped to >= 1e-12 before ln


@dataclass
class MemoryBank:
    """Per-image instance feature store, momentum-updated."""

    features: np.ndarray  # (n, D)
    momentum: float

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {self.momentum}")
        self.features = np.asarray(self.features, dtype=np.float64)

    def update(self, indices: np.ndarray, new_features: np.ndarray) -> None:
        """rows[i] <- momentum * rows[i] + (1 - momentum) * new_features."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.features.shape[0]):
            raise IndexError(
                f"bank update index out of range [0, {self.features.shape[0]})"
            )
        a = self.momentum
        self.features[indices] = a * self.features[indices] + (1.0 - a) * new_features


def update_banks(
    bank1: MemoryBank,
    bank2: MemoryBank,
    indices: np.ndarray,
    feats1: np.ndarray,
    feats2: np.ndarray,
) -> None:
    bank1.update(indices, feats1)
    bank2.update(indices, feats2)


def compute_centers(bank_features: np.ndarray, labels: PseudoLabels) -> np.ndarray:
    """Per-cluster mean of bank rows; (m, D), constant w.r.t. the tape."""
    m = labels.n_clusters
    d = bank_features.shape[1]
    centers = np.zeros((m, d))
    counts = np.zeros(m)
    for idx, cid in labels.mapping.items():
        centers[cid] += bank_features[idx]
        counts[cid] += 1
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"cluster id {int(empty[0])} has no members")
    return centers / counts[:, None]


def _normalize_rows_const(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm {what} row {int(zero[0])}")
    return rows / norms


def _selection_matrix(rows: np.ndarray, total: int) -> np.ndarray:
    sel = np.zeros((rows.size, total))
    sel[np.arange(rows.size), rows] = 1.0
    return sel


def instance_loss(tape: Tape, z: Tensor, target: Tensor, stop_grad: bool = True) -> Tensor:
    """Mean negative cosine similarity between matching rows of z and target.

    With ``stop_grad`` the target is detached, so its branch receives a
    bitwise-zero gradient from this term.
    """
    if stop_grad:
        target = target.detach()
    zn = tape.l2_normalize_rows(z)
    tn = tape.l2_normalize_rows(target)
    dots = tape.matmul(tape.mul(zn, tn), tape.constant(np.ones((z.shape[1], 1))))
    return tape.scale(tape.mean(dots), -1.0)


def inter_view_loss(
    tape: Tape, z: Tensor, centers: np.ndarray, labels_batch: np.ndarray
) -> Tensor:
    """Mean negative cosine between z rows and their pseudo-label centers.

    Centers are constants; only z carries gradient. Unlabeled rows
    (label < 0) are excluded from the mean.
    """
    labeled = np.flatnonzero(labels_batch >= 0)
    if labeled.size == 0:
        return tape.constant(np.asarray(0.0))
    sel = tape.constant(_selection_matrix(labeled, z.shape[0]))
    z_lab = tape.matmul(sel, z)
    zn = tape.l2_normalize_rows(z_lab)
    centers_n = _normalize_rows_const(centers, "cluster center")
    target = tape.constant(centers_n[labels_batch[labeled]])
    dots = tape.matmul(tape.mul(zn, target), tape.constant(np.ones((z.shape[1], 1))))
    return tape.scale(tape.mean(dots), -1.0)


def soft_assignment_log_probs(
    tape: Tape, feats: Tensor, centers: np.ndarray, tau: float
) -> Tensor:
    """Row-wise log softmax of feature/center inner products at temperature tau.

    Computed in log space with max-subtraction: ln q = s - logsumexp(s).
    Returns a (B, m) tensor.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    m = centers.shape[0]
    logits = tape.scale(tape.matmul(feats, tape.constant(centers.T)), 1.0 / tau)
    row_max = logits.data.max(axis=1, keepdims=True)  # constant shift, detached
    shifted = tape.sub(logits, tape.constant(np.repeat(row_max, m, axis=1)))
    sums = tape.matmul(tape.exp(shifted), tape.constant(np.ones((m, 1))))
    lse = tape.add(tape.ln(sums), tape.constant(row_max))
    return tape.sub(logits, tape.matmul(lse, tape.constant(np.ones((1, m)))))


def focal_center_loss(
    tape: Tape,
    feats: Tensor,
    centers: np.ndarray,
    labels_batch: np.ndarray,
    tau: float,
) -> Tensor:
    """Mean of -(1 - q)^2 ln q at each labeled row's pseudo-label column.

    Features are L2-normalized on the tape before the inner products, so
    center/feature dot products stay in [-1, 1] and the temperature keeps
    its intended sharpness.
    """
    labeled = np.flatnonzero(labels_batch >= 0)
    if labeled.size == 0 or centers.shape[0] == 0:
        return tape.constant(np.asarray(0.0))
    sel = tape.constant(_selection_matrix(labeled, feats.shape[0]))
    f_lab = tape.l2_normalize_rows(tape.matmul(sel, feats))
    log_q = soft_assignment_log_probs(tape, f_lab, centers, tau)
    onehot = tape.constant(_selection_matrix(labels_batch[labeled], centers.shape[0]))
    ln_q = tape.matmul(tape.mul(log_q, onehot), tape.constant(np.ones((centers.shape[0], 1))))
    q = tape.exp(ln_q)
    floor = tape.constant(np.full(ln_q.shape, LN_Q_FLOOR))
    ln_q_clamped = tape.add(tape.relu(tape.sub(ln_q, floor)), floor)
    one = tape.constant(np.ones(q.shape))
    w = tape.sub(one, q)
    per_row = tape.mul(tape.mul(w, w), ln_q_clamped)
    return tape.scale(tape.mean(per_row), -1.0)


@dataclass
class LossMode:
    """Which terms are active and where stop-gradient applies."""

    symmetric: bool = False
    stop_grad: bool = True
    drop_instance: bool = False
    drop_cluster: bool = False
    drop_inter: bool = False
    drop_intra: bool = False
    intra_branch2: bool = True  # diagnostic switch: drop only the second branch's term

    @property
    def single_branch(self) -> bool:
        # with instance and cluster losses both off, only the second-branch
        # reduced assignment term remains; the trainer runs it on one branch
        return self.drop_instance and self.drop_cluster

    @property
    def use_instance(self) -> bool:
        return not self.drop_instance and not self.single_branch

    @property
    def use_inter(self) -> bool:
        return not (self.drop_cluster or self.drop_inter or self.single_branch)

    @property
    def intra_form(self) -> str:
        """'both' = q and q-tilde terms; 'reduced' = q-tilde term only."""
        if self.single_branch:
            return "reduced"
        if self.drop_cluster or self.drop_intra:
            return "reduced"
        return "both"


@dataclass
class LossBreakdown:
    instance: float
    inter: float
    intra: float
    total: float
    grad_norm_branch1: float | None = None
    grad_norm_branch2: float | None = None


def total_loss(
    tape: Tape,
    *,
    z: Tensor | None,
    x: Tensor | None,
    x2: Tensor,
    labels_batch: np.ndarray,
    centers1: np.ndarray | None,
    centers2: np.ndarray | None,
    tau: float,
    mode: LossMode,
    z2: Tensor | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Assemble the enabled loss terms; total is their exact float sum.

    ``x``/``z`` are first-branch features and predictor outputs, ``x2`` the
    second branch's features (``z2`` its predictor output in symmetric mode).
    In single-branch mode (instance and cluster losses both dropped) the
    caller passes the lone branch's features as ``x2`` with its own centers
    as ``centers2``. Unlabeled samples (label -1) contribute only to the
    instance term. Center-based terms are skipped when centers are missing.
    """
    zero = tape.constant(np.asarray(0.0))
    have_centers1 = centers1 is not None and centers1.shape[0] > 0
    have_centers2 = centers2 is not None and centers2.shape[0] > 0

    inst = zero
    if mode.use_instance:
        inst = instance_loss(tape, z, x2, stop_grad=mode.stop_grad)
        if mode.symmetric:
            mirrored = instance_loss(tape, z2, x, stop_grad=mode.stop_grad)
            inst = tape.add(inst, mirrored)

    inter = zero
    if mode.use_inter and have_centers2:
        inter = inter_view_loss(tape, z, centers2, labels_batch)
        if mode.symmetric and have_centers1:
            inter = tape.add(inter, inter_view_loss(tape, z2, centers1, labels_batch))

    intra = zero
    if mode.intra_form == "both":
        if have_centers1:
            intra = tape.add(intra, focal_center_loss(tape, x, centers1, labels_batch, tau))
        if have_centers2 and mode.intra_branch2:
            intra = tape.add(intra, focal_center_loss(tape, x2, centers2, labels_batch, tau))
    else:  # reduced: only the second branch's assignment term
        if have_centers2:
            intra = focal_center_loss(tape, x2, centers2, labels_batch, tau)

    total = tape.add(tape.add(inst, inter), intra)
    breakdown = LossBreakdown(
        instance=inst.item(), inter=inter.item(), intra=intra.item(), total=total.item()
    )
    return total, breakdown
