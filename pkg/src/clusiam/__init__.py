"""Cluster-guided asymmetric contrastive learning for unsupervised re-identification.

A self-contained desk-scale stack: a minimal reverse-mode autodiff engine,
a siamese MLP encoder pair with a predictor head, density clustering with
noise-score refinement, memory-bank contrastive losses, retrieval metrics,
and a synthetic color-confounded benchmark.
"""

from .autodiff import AdamState, GradCheckReport, Tape, Tensor, adam_step, finite_diff_check
from .augment import AugmentConfig, apply_basic, color_jitter, make_views, to_grayscale
from .clustering import (
    UNLABELED,
    ClusterAssignment,
    PseudoLabels,
    assign_pseudo_labels,
    cluster_features,
    dbscan,
    pairwise_distance,
    refine,
    sub_cluster_score,
)
from .dataset import ReidDataset, SyntheticSpec, generate, load_ppm_dir, split
from .estimator import ContrastiveReidEncoder, RefinedDbscan
from .evaluation import EvalResult, RetrievalSet, average_precision, evaluate, rank_gallery
from .losses import LossBreakdown, LossMode, MemoryBank, compute_centers, total_loss
from .model import SiameseModel, encode, init_model, load_checkpoint, predict, save_checkpoint
from .trainer import TrainConfig, TrainState, evaluate_branch, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AugmentConfig",
    "ClusterAssignment",
    "ContrastiveReidEncoder",
    "EvalResult",
    "GradCheckReport",
    "LossBreakdown",
    "LossMode",
    "MemoryBank",
    "PseudoLabels",
    "RefinedDbscan",
    "ReidDataset",
    "RetrievalSet",
    "SiameseModel",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "UNLABELED",
    "adam_step",
    "apply_basic",
    "assign_pseudo_labels",
    "average_precision",
    "cluster_features",
    "color_jitter",
    "compute_centers",
    "dbscan",
    "encode",
    "evaluate",
    "evaluate_branch",
    "finite_diff_check",
    "generate",
    "init_model",
    "load_checkpoint",
    "load_ppm_dir",
    "lr_at",
    "make_views",
    "pairwise_distance",
    "predict",
    "rank_gallery",
    "refine",
    "save_checkpoint",
    "split",
    "sub_cluster_score",
    "to_grayscale",
    "total_loss",
    "train",
]
