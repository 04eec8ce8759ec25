"""End-to-end training loop.

Every epoch: re-cluster first-branch features into pseudo labels (DBSCAN at
the coarse radius, over-segmentation at the fine radius, noise-score
refinement), recompute cluster centers from both memory banks, run one pass
of shuffled mini-batches (two augmented views, both branches forward, loss,
backward, Adam per parameter group, bank updates), then evaluate the first
branch on the held-out query/gallery split and keep the best checkpoint.

The loop is single-threaded and fully deterministic given (config, seed).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment, clustering, losses, model as model_mod
from .autodiff import AdamState, Tape, adam_step
from .evaluation import EvalResult, RetrievalSet, evaluate
from .dataset import ReidDataset

log = logging.getLogger(__name__)

MODES = ("asymmetric", "symmetric")
CLUSTER_SOURCES = ("raw", "viewT")

EPOCH_CSV_COLUMNS = (
    "epoch",
    "n_clusters",
    "labeled_fraction",
    "loss_instance",
    "loss_inter",
    "loss_intra",
    "loss_total",
    "map",
    "cmc1",
    "cmc5",
    "cmc10",
    "feature_std",
)
BATCH_CSV_COLUMNS = ("epoch", "batch", "loss_instance", "loss_inter", "loss_intra", "loss_total")


@dataclass
class TrainConfig:
    """Full hyperparameter record; every field has a config-file/CLI equivalent."""

    epochs: int = 80
    batch_size: int = 64
    lr: float = 0.00035
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float = 0.05
    bank_momentum: float = 0.2
    cluster_eps: float = 0.6
    cluster_eps_fine: float = 0.58
    cluster_min_pts: int = 4
    min_cluster_size: int = 2
    refine: bool = True
    embed_dim: int = 64
    hidden_dims: tuple[int, ...] = (256,)
    mode: str = "asymmetric"
    stop_grad: bool = True
    drop_instance: bool = False
    drop_cluster: bool = False
    drop_inter: bool = False
    drop_intra: bool = False
    intra_branch2: bool = True
    view: str = "gray"
    cluster_on: str = "raw"
    flip_prob: float = 0.5
    crop_pad: int = 2
    erase_prob: float = 0.5
    erase_area_min: float = 0.1
    erase_area_max: float = 0.3
    jitter_strength: float = 0.4
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.view not in augment.VIEW_MODES:
            raise ValueError(f"unknown view {self.view!r}; expected one of {augment.VIEW_MODES}")
        if self.cluster_on not in CLUSTER_SOURCES:
            raise ValueError(f"cluster_on must be one of {CLUSTER_SOURCES}")
        for name in ("epochs",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "lr", "tau", "cluster_eps", "cluster_eps_fine", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def augment_config(self) -> augment.AugmentConfig:
        return augment.AugmentConfig(
            flip_prob=self.flip_prob,
            crop_pad=self.crop_pad,
            erase_prob=self.erase_prob,
            erase_area_range=(self.erase_area_min, self.erase_area_max),
            jitter_strength=self.jitter_strength,
        )

    def loss_mode(self) -> losses.LossMode:
        return losses.LossMode(
            symmetric=self.mode == "symmetric",
            stop_grad=self.stop_grad,
            drop_instance=self.drop_instance,
            drop_cluster=self.drop_cluster,
            drop_inter=self.drop_inter,
            drop_intra=self.drop_intra,
            intra_branch2=self.intra_branch2,
        )

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: base lr scaled by decay_factor every decay_every epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class EpochRecord:
    epoch: int
    n_clusters: int
    labeled_fraction: float
    loss_instance: float
    loss_inter: float
    loss_intra: float
    loss_total: float
    map: float
    cmc1: float
    cmc5: float
    cmc10: float
    feature_std: float


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    loss_instance: float
    loss_inter: float
    loss_intra: float
    loss_total: float


@dataclass
class TrainState:
    model: model_mod.SiameseModel
    adam_main: AdamState
    adam_second: AdamState
    bank1: losses.MemoryBank
    bank2: losses.MemoryBank
    best_map: float = 0.0
    best_model: model_mod.SiameseModel | None = None
    history: list[EpochRecord] = field(default_factory=list)
    batch_log: list[BatchRecord] = field(default_factory=list)
    collapse_epochs: list[int] = field(default_factory=list)


def collapse_threshold(embed_dim: int) -> float:
    return 0.1 / np.sqrt(embed_dim)


def _normalize_rows(feats: np.ndarray) -> np.ndarray:
    norms = np.sqrt((feats * feats).sum(axis=1, keepdims=True))
    norms[norms == 0.0] = 1.0
    return feats / norms


def feature_std(features: np.ndarray) -> float:
    """Mean per-dimension std of L2-normalized rows; near zero under collapse."""
    norms = np.sqrt((features * features).sum(axis=1, keepdims=True))
    norms[norms == 0.0] = 1.0
    normalized = features / norms
    return float(normalized.std(axis=0).mean())


def init_state(cfg: TrainConfig, dataset: ReidDataset) -> TrainState:
    cfg.validate()
    if not dataset.train_indices:
        raise ValueError("dataset has no training samples")
    sample = dataset.samples[dataset.train_indices[0]]
    h, w, _ = sample.image.shape
    net = model_mod.init_model(
        (h, w), cfg.hidden_dims, cfg.embed_dim, cfg.seed, symmetric=cfg.mode == "symmetric"
    )
    train_images = dataset.images(dataset.train_indices)
    # banks hold L2-normalized features so center/feature inner products
    # stay on the cosine scale the temperature is tuned for
    feats1 = _normalize_rows(model_mod.encode(train_images, net.encoder1))
    base2 = np.stack([augment.second_view_base(im, cfg.view) for im in train_images])
    feats2 = _normalize_rows(model_mod.encode(base2, net.encoder2))
    adam_kw = dict(
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay
    )
    return TrainState(
        model=net,
        adam_main=AdamState(**adam_kw),
        adam_second=AdamState(**adam_kw),
        bank1=losses.MemoryBank(feats1, cfg.bank_momentum),
        bank2=losses.MemoryBank(feats2, cfg.bank_momentum),
    )


def _clustering_features(
    state: TrainState, images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> np.ndarray:
    if cfg.cluster_on == "viewT":
        images = np.stack([augment.apply_basic(im, cfg.augment_config(), rng) for im in images])
    return model_mod.encode(images, state.model.encoder1)


def _grad_group(
    grads: dict[int, np.ndarray], leaves: dict[str, "object"], prefixes: tuple[str, ...]
) -> dict[str, np.ndarray]:
    out = {}
    for name, leaf in leaves.items():
        if name.split(".")[0] in prefixes:
            out[name] = grads[leaf.node_id]
    return out


def _grad_norm(group: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in group.values())))


def run_epoch(
    state: TrainState,
    dataset: ReidDataset,
    cfg: TrainConfig,
    epoch: int,
    rng_aug: np.random.Generator,
    rng_shuffle: np.random.Generator,
    rng_cluster: np.random.Generator,
) -> EpochRecord:
    train_positions = np.arange(len(dataset.train_indices))
    train_images = dataset.images(dataset.train_indices)
    aug_cfg = cfg.augment_config()
    mode = cfg.loss_mode()

    feats = _clustering_features(state, train_images, cfg, rng_cluster)
    assignment = clustering.cluster_features(
        feats,
        eps=cfg.cluster_eps,
        eps_fine=cfg.cluster_eps_fine,
        min_pts=cfg.cluster_min_pts,
        min_cluster_size=cfg.min_cluster_size,
        refine_enabled=cfg.refine,
    )
    pseudo = clustering.assign_pseudo_labels(assignment, epoch)
    if pseudo.n_clusters == 0:
        log.warning("epoch %d: no labeled clusters; training with the instance term only", epoch)
        centers1 = centers2 = None
    else:
        centers1 = losses.compute_centers(state.bank1.features, pseudo)
        centers2 = losses.compute_centers(state.bank2.features, pseudo)

    lr = lr_at(epoch, cfg)
    state.adam_main.lr = lr
    state.adam_second.lr = lr

    order = rng_shuffle.permutation(train_positions)
    sums = np.zeros(4)
    n_batches = 0
    for b_start in range(0, order.size, cfg.batch_size):
        batch = order[b_start : b_start + cfg.batch_size]
        record = _train_batch(
            state, dataset, cfg, mode, aug_cfg, batch, pseudo, centers1, centers2, rng_aug,
            epoch, n_batches,
        )
        state.batch_log.append(record)
        sums += (record.loss_instance, record.loss_inter, record.loss_intra, record.loss_total)
        n_batches += 1

    mean_losses = sums / max(n_batches, 1)
    monitor = feature_std(model_mod.encode(train_images, state.model.encoder1))
    if monitor < collapse_threshold(cfg.embed_dim):
        state.collapse_epochs.append(epoch)
        log.warning("epoch %d: feature std %.3g below collapse threshold", epoch, monitor)

    result = evaluate_branch(state.model, dataset, branch=1)
    if result is not None and result.mean_ap > state.best_map:
        state.best_map = result.mean_ap
        state.best_model = state.model.copy()

    return EpochRecord(
        epoch=epoch,
        n_clusters=pseudo.n_clusters,
        labeled_fraction=assignment.labeled_fraction(),
        loss_instance=float(mean_losses[0]),
        loss_inter=float(mean_losses[1]),
        loss_intra=float(mean_losses[2]),
        loss_total=float(mean_losses[3]),
        map=result.mean_ap if result is not None else float("nan"),
        cmc1=result.cmc1 if result is not None else float("nan"),
        cmc5=result.cmc5 if result is not None else float("nan"),
        cmc10=result.cmc10 if result is not None else float("nan"),
        feature_std=monitor,
    )


def _train_batch(
    state: TrainState,
    dataset: ReidDataset,
    cfg: TrainConfig,
    mode: losses.LossMode,
    aug_cfg: augment.AugmentConfig,
    batch: np.ndarray,
    pseudo: clustering.PseudoLabels,
    centers1: np.ndarray | None,
    centers2: np.ndarray | None,
    rng_aug: np.random.Generator,
    epoch: int,
    batch_index: int,
) -> BatchRecord:
    images = [dataset.samples[dataset.train_indices[p]].image for p in batch]
    labels_batch = np.array([pseudo.mapping.get(int(p), clustering.UNLABELED) for p in batch])

    tape = Tape()
    leaves = model_mod.model_leaves(tape, state.model)

    if mode.single_branch:
        # lone branch trained on the basic (color) augmentation of the second view
        views = np.stack([augment.apply_basic(im, aug_cfg, rng_aug) for im in images])
        x1 = model_mod.encode_on_tape(tape, views, model_mod.encoder_layers(leaves, "encoder1"))
        total, breakdown = losses.total_loss(
            tape, z=None, x=None, x2=x1, labels_batch=labels_batch,
            centers1=None, centers2=centers1, tau=cfg.tau, mode=mode,
        )
        feats1_new, feats2_new = x1.data, None
    else:
        pairs = [augment.make_views(im, aug_cfg, rng_aug, mode=cfg.view) for im in images]
        views1 = np.stack([p[0] for p in pairs])
        views2 = np.stack([p[1] for p in pairs])
        x1 = model_mod.encode_on_tape(tape, views1, model_mod.encoder_layers(leaves, "encoder1"))
        z1 = model_mod.predict_on_tape(tape, x1, leaves["predictor1.w"], leaves["predictor1.b"])
        x2 = model_mod.encode_on_tape(tape, views2, model_mod.encoder_layers(leaves, "encoder2"))
        z2 = None
        if mode.symmetric:
            z2 = model_mod.predict_on_tape(tape, x2, leaves["predictor2.w"], leaves["predictor2.b"])
        total, breakdown = losses.total_loss(
            tape, z=z1, x=x1, x2=x2, labels_batch=labels_batch,
            centers1=centers1, centers2=centers2, tau=cfg.tau, mode=mode, z2=z2,
        )
        feats1_new, feats2_new = x1.data, x2.data

    grads = tape.backward(total)
    group_main = _grad_group(grads, leaves, ("encoder1", "predictor1"))
    group_second = _grad_group(grads, leaves, ("encoder2", "predictor2"))
    tensors = state.model.named_tensors()
    # groups whose gradient is identically zero are skipped entirely, so an
    # untouched branch stays bitwise fixed (no weight-decay drift)
    if any(g.any() for g in group_main.values()):
        adam_step({n: tensors[n] for n in group_main}, group_main, state.adam_main)
    if group_second and any(g.any() for g in group_second.values()):
        adam_step({n: tensors[n] for n in group_second}, group_second, state.adam_second)
    breakdown.grad_norm_branch1 = _grad_norm(group_main)
    breakdown.grad_norm_branch2 = _grad_norm(group_second)

    state.bank1.update(batch, _normalize_rows(feats1_new))
    if feats2_new is not None:
        state.bank2.update(batch, _normalize_rows(feats2_new))

    return BatchRecord(
        epoch=epoch,
        batch=batch_index,
        loss_instance=breakdown.instance,
        loss_inter=breakdown.inter,
        loss_intra=breakdown.intra,
        loss_total=breakdown.total,
    )


def evaluate_branch(
    net: model_mod.SiameseModel, dataset: ReidDataset, branch: int = 1
) -> EvalResult | None:
    """Score one branch's features on the query/gallery split (None if absent)."""
    if not dataset.query_indices or not dataset.gallery_indices:
        return None
    encoder = net.encoder1 if branch == 1 else net.encoder2
    query = RetrievalSet(
        features=model_mod.encode(dataset.images(dataset.query_indices), encoder),
        identities=dataset.identities(dataset.query_indices),
        cameras=dataset.cameras(dataset.query_indices),
    )
    gallery = RetrievalSet(
        features=model_mod.encode(dataset.images(dataset.gallery_indices), encoder),
        identities=dataset.identities(dataset.gallery_indices),
        cameras=dataset.cameras(dataset.gallery_indices),
    )
    return evaluate(query, gallery)


def train(cfg: TrainConfig, dataset: ReidDataset, out_dir: str | Path | None = None) -> TrainState:
    """Run the whole loop; optionally stream logs and checkpoints to out_dir."""
    state = init_state(cfg, dataset)
    ss = np.random.SeedSequence(cfg.seed)
    ss_aug, ss_shuffle, ss_cluster = ss.spawn(3)
    rng_aug = np.random.default_rng(ss_aug)
    rng_shuffle = np.random.default_rng(ss_shuffle)
    rng_cluster = np.random.default_rng(ss_cluster)

    for epoch in range(cfg.epochs):
        record = run_epoch(state, dataset, cfg, epoch, rng_aug, rng_shuffle, rng_cluster)
        state.history.append(record)

    if out_dir is not None:
        write_logs(state, cfg, Path(out_dir))
    return state


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_logs(state: TrainState, cfg: TrainConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "epochs.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(EPOCH_CSV_COLUMNS)
        for r in state.history:
            writer.writerow([_fmt(getattr(r, c)) for c in EPOCH_CSV_COLUMNS])
    with open(out_dir / "batches.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BATCH_CSV_COLUMNS)
        for r in state.batch_log:
            writer.writerow([_fmt(getattr(r, c)) for c in BATCH_CSV_COLUMNS])
    model_mod.save_checkpoint(out_dir / "checkpoint_final.json", state.model, cfg.as_dict())
    if state.best_model is not None:
        model_mod.save_checkpoint(out_dir / "checkpoint_best.json", state.best_model, cfg.as_dict())
