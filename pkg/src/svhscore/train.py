"""Deterministic training: fold split, OneCycle schedule, AdamW, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidConfig, NonFiniteLoss, TooFewPatients
from .model import LossWeights, NetworkConfig, Params, init_params, is_decay_exempt, loss_and_gradients, save_checkpoint
from .preprocess import AugmentRanges, BBox, augment_or_identity, crop_resize
from .records import IMAGE_KEYS, AnnotatedImage, PatientRecord
from .schema import DEFAULT_SCHEMA, JointSchema
from .targets import MaskConfig, PixelTargets, SmoothingConfig, build_pixel_targets

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_rmse_narrowing", "val_rmse_erosion", "lr"]
AUGMENT_RETRIES = 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    max_lr: float = 3e-3
    div_initial: float = 25.0
    final_div: float = 1e4
    pct_up: float = 0.3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    n_folds: int = 8
    val_fold: int = 0
    mask: MaskConfig = field(default_factory=MaskConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: bool = True
    augment_ranges: AugmentRanges = field(default_factory=AugmentRanges)
    use_validation: bool = True

    def __post_init__(self):
        if not 0 < self.pct_up < 1:
            raise InvalidConfig(f"pct_up must lie in (0, 1), got {self.pct_up}")
        if self.max_lr <= 0:
            raise InvalidConfig(f"max_lr must be positive, got {self.max_lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("epochs must be >= 0 and batch_size >= 1")
        if self.n_folds < 2 or not 0 <= self.val_fold < self.n_folds:
            raise InvalidConfig(f"bad fold setup n_folds={self.n_folds}, val_fold={self.val_fold}")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


def split_folds(patient_ids: Sequence[str], n_folds: int = 8, val_fold: int = 0) -> tuple[list[str], list[str]]:
    """Patient-level split: sorted index i goes to fold ``i % n_folds``."""
    ids = sorted(patient_ids)
    if len(set(ids)) != len(ids):
        raise InvalidConfig("patient ids must be unique")
    if n_folds < 2:
        raise InvalidConfig("need at least two folds")
    if len(ids) < n_folds:
        raise TooFewPatients(f"{len(ids)} patients cannot fill {n_folds} folds")
    val = [pid for i, pid in enumerate(ids) if i % n_folds == val_fold]
    train = [pid for i, pid in enumerate(ids) if i % n_folds != val_fold]
    return train, val


def lr_at(t: float, cfg: TrainConfig) -> float:
    """OneCycle: cosine warm-up to ``max_lr`` at ``pct_up``, then cosine anneal."""
    start = cfg.max_lr / cfg.div_initial
    end = start / cfg.final_div
    if t <= cfg.pct_up:
        frac = t / cfg.pct_up
        return start + (cfg.max_lr - start) * (1 - math.cos(math.pi * frac)) / 2
    frac = (t - cfg.pct_up) / (1 - cfg.pct_up)
    return end + (cfg.max_lr - end) * (1 + math.cos(math.pi * frac)) / 2


def train_step(
    params: Params,
    opt: OptimizerState,
    batch: tuple[np.ndarray, list[PixelTargets]],
    lr: float,
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
) -> tuple[Params, OptimizerState, float]:
    """One AdamW update on the batch-mean loss. Updates arrays in place."""
    images, targets = batch
    loss, terms, grads = loss_and_gradients(params, net_cfg, images, targets, cfg.loss_weights)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss {loss} at step {opt.step + 1} (terms seg/narrowing/erosion = {terms})")
    apply_adamw(params, grads, opt, lr, cfg)
    return params, opt, loss


def apply_adamw(params: Params, grads: Params, opt: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params.items():
        g = grads[name]
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and not is_decay_exempt(name):
            update = update + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)


def to_network_size(image: AnnotatedImage, net_cfg: NetworkConfig) -> AnnotatedImage:
    h, w = image.pixels.shape
    if (h, w) == (net_cfg.in_h, net_cfg.in_w):
        return image
    return crop_resize(image, BBox.full(h, w), net_cfg.in_h, net_cfg.in_w)


def patient_images(patients: Sequence[PatientRecord], net_cfg: NetworkConfig) -> list[AnnotatedImage]:
    return [to_network_size(p.images[k], net_cfg) for p in patients for k in IMAGE_KEYS]


def _prepare(args):
    image, seeds, cfg, schema = args
    if seeds is not None:
        image, _ = augment_or_identity(image, seeds, cfg.augment_ranges)
    return image.pixels, build_pixel_targets(image, schema, cfg.mask, cfg.smoothing)


@dataclass
class FitResult:
    params: Params
    checkpoint: Path | None
    metrics: list[dict]
    train_ids: list[str]
    val_ids: list[str]


def fit(
    dataset: Sequence[PatientRecord],
    cfg: TrainConfig = TrainConfig(),
    net_cfg: NetworkConfig = NetworkConfig(),
    out_dir=None,
    schema: JointSchema = DEFAULT_SCHEMA,
    threads: int = 1,
    name: str = "model",
) -> FitResult:
    """Train one model; writes ``<name>.svhc`` and ``<name>_metrics.csv`` when ``out_dir`` is given."""
    from .evaluation import evaluate  # evaluation imports train for the ablation harness
    from .infer import predict_images

    by_id = {p.patient_id: p for p in dataset}
    if cfg.use_validation:
        train_ids, val_ids = split_folds(list(by_id), cfg.n_folds, cfg.val_fold)
    else:
        train_ids, val_ids = sorted(by_id), []
    if not train_ids:
        raise TooFewPatients("no training patients after the split")
    train_imgs = patient_images([by_id[i] for i in train_ids], net_cfg)
    val_imgs = patient_images([by_id[i] for i in val_ids], net_cfg)

    rng = np.random.default_rng(cfg.seed)
    params = init_params(net_cfg, int(rng.integers(2**63 - 1)))
    opt = OptimizerState.zeros_like(params)
    steps_per_epoch = math.ceil(len(train_imgs) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    metrics = []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    mapper = pool.map if pool else map
    try:
        for epoch in range(1, cfg.epochs + 1):
            # shuffle patients; each patient's four images stay adjacent
            order = (rng.permutation(len(train_ids))[:, None] * 4 + np.arange(4)).ravel()
            if cfg.augment:
                seeds = rng.integers(0, 2**63 - 1, size=(len(train_imgs), AUGMENT_RETRIES))
            losses = []
            lr = 0.0
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                jobs = [(train_imgs[i], seeds[i] if cfg.augment else None, cfg, schema) for i in idx]
                prepared = list(mapper(_prepare, jobs))
                images = np.stack([p[0] for p in prepared]).astype(np.float32)
                t = opt.step / max(total_steps - 1, 1)
                lr = lr_at(min(t, 1.0), cfg)
                _, _, loss = train_step(params, opt, (images, [p[1] for p in prepared]), lr, cfg, net_cfg)
                losses.append(loss)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr}
            if val_imgs:
                report = evaluate(predict_images(params, net_cfg, val_imgs, schema), val_imgs, schema)
                row["val_rmse_narrowing"] = report.rmse_narrowing
                row["val_rmse_erosion"] = report.rmse_erosion
            else:
                row["val_rmse_narrowing"] = row["val_rmse_erosion"] = float("nan")
            metrics.append(row)
            log.info(
                "epoch %d loss %.4f val rmse n=%.4f e=%.4f lr=%.2e",
                epoch, row["train_loss"], row["val_rmse_narrowing"], row["val_rmse_erosion"], lr,
            )
    finally:
        if pool:
            pool.shutdown()

    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"seed": cfg.seed, "epochs": cfg.epochs, "steps": opt.step, "train_ids": train_ids, "val_ids": val_ids}
        ckpt = save_checkpoint(out / f"{name}.svhc", params, net_cfg, meta)
        write_metrics_csv(out / f"{name}_metrics.csv", metrics)
    return FitResult(params, ckpt, metrics, train_ids, val_ids)


def write_metrics_csv(path, metrics: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in metrics:
            writer.writerow(
                [row["epoch"]] + [f"{row[k]:.6f}" for k in ("train_loss", "val_rmse_narrowing", "val_rmse_erosion")]
                + [f"{row['lr']:.6e}"]
            )
    return Path(path)
