"""
Losses, optimisers, augmentation and the training / model-selection loops.

Losses and metrics only look at pixels inside each scene's valid mask.
Every random choice (initialisation, splits, shuffling, dropout) derives
from ``HyperParams.seed``, so a serial run is reproducible bit for bit.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .errors import DegenerateInputError, DivergenceError, ShapeError
from .eval_metrics import ConfusionCounts, binary_iou_from_counts
from .kitti_io import quantize_unit
from .model_zoo import (
    Model,
    ModelVariant,
    ScaleProfile,
    build_model,
    prepare_inputs,
)
from .synth_data import Scene
from .tensor_core import Tensor

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
DICE_SMOOTH = 1.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

OPTIMIZERS = ("adam", "sgd")
LOSSES = ("bce", "dice")


@dataclass(frozen=True)
class HyperParams:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    loss: str = "bce"
    dropout_rate: float = 0.2
    val_split: float = 0.1
    aug_rate: float = 1.0
    batch_size: int = 2
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "optimizer", self.optimizer.lower())
        object.__setattr__(self, "loss", self.loss.lower())
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be a finite non-negative number")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0.0 < self.val_split < 1.0:
            raise ValueError("val_split must lie in (0, 1)")
        if not 0.0 <= self.aug_rate <= 1.0:
            raise ValueError("aug_rate must lie in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_biou: float
    val_iou_road: float


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: int = 0

    def __len__(self) -> int:
        return len(self.epochs)

    def to_text(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tval_biou\tval_iou_road"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch}\t{e.train_loss:.8f}\t{e.val_loss:.8f}\t{e.val_biou:.6f}\t{e.val_iou_road:.6f}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    variant: ModelVariant
    profile: ScaleProfile
    params: dict[str, np.ndarray]
    hp: HyperParams
    epoch: int = 0
    val_biou: float = float("nan")

    def header(self) -> dict:
        return {
            "variant": self.variant.value,
            "profile": asdict(self.profile),
            "hyperparams": asdict(self.hp),
            "epoch": self.epoch,
            "val_biou": self.val_biou,
        }

    def save(self, path: str | os.PathLike) -> None:
        tc.save_parameters(path, self.params, self.header())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        params, meta = tc.load_parameters(path)
        prof = meta["profile"]
        profile = ScaleProfile(
            prof["input_h"],
            prof["input_w"],
            tuple(prof["encoder_depths"]),
            prof["dense_width"],
            tuple(prof["convs_per_block"]),
        )
        return cls(
            ModelVariant(meta["variant"]),
            profile,
            params,
            HyperParams(**meta["hyperparams"]),
            meta["epoch"],
            meta["val_biou"],
        )

    def build(self) -> Model:
        model = build_model(self.variant, self.profile, self.hp.seed, self.hp.dropout_rate)
        model.load_state_dict(self.params)
        return model


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[tuple[int, ...], ...]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _loss_inputs(pred: Tensor, target, valid) -> tuple[np.ndarray, np.ndarray, int]:
    t = np.asarray(target, dtype=np.float64)
    v = np.asarray(valid, dtype=bool)
    if t.shape != pred.shape or v.shape != pred.shape:
        raise ShapeError(f"pred {pred.shape}, target {t.shape} and valid {v.shape} must match")
    n = int(np.count_nonzero(v))
    if n == 0:
        raise DegenerateInputError("loss needs at least one valid pixel")
    return t, v, n


def bce_loss(pred: Tensor, target, valid) -> Tensor:
    """Mean binary cross-entropy over valid pixels (pred clamped to [1e-7, 1-1e-7])."""
    t, v, n = _loss_inputs(pred, target, valid)
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_pixel = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    value = np.asarray(per_pixel[v].sum() / n)
    inside = v & (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)

    def bw(g):
        d = (-t / p + (1.0 - t) / (1.0 - p)) / n
        return (g * np.where(inside, d, 0.0),)

    return tc.record_op(value, (pred,), bw)


def dice_loss(pred: Tensor, target, valid) -> Tensor:
    """``1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`` over valid pixels."""
    t, v, _ = _loss_inputs(pred, target, valid)
    p = pred.data
    inter = float((p * t)[v].sum())
    denom = float(p[v].sum() + t[v].sum()) + DICE_SMOOTH
    numer = 2.0 * inter + DICE_SMOOTH
    value = np.asarray(1.0 - numer / denom)

    def bw(g):
        d = -(2.0 * t * denom - numer) / denom**2
        return (g * np.where(v, d, 0.0),)

    return tc.record_op(value, (pred,), bw)


LOSS_FUNCTIONS = {"bce": bce_loss, "dice": dice_loss}


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


def _check_aligned(params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} and gradient {g.shape} differ")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
    _check_aligned(params, grads)
    for p, g in zip(params, grads):
        p -= lr * g


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float, state: AdamState
) -> None:
    _check_aligned(params, grads)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - ADAM_BETA1**state.step
    c2 = 1.0 - ADAM_BETA2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------


def augment_dataset(scenes: Sequence[Scene], aug_rate: float, seed: int = 0) -> list[Scene]:
    """Append a left-right flipped copy of ``floor(aug_rate * n)`` seeded-random scenes."""
    if not 0.0 <= aug_rate <= 1.0:
        raise ValueError("aug_rate must lie in [0, 1]")
    scenes = list(scenes)
    n_aug = int(math.floor(aug_rate * len(scenes)))
    picked = np.random.default_rng(seed).permutation(len(scenes))[:n_aug]
    return scenes + [scenes[i].fliplr() for i in picked]


def kfold_split(n: int, k: int, seed: int = 0) -> FoldPlan:
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = tuple(tuple(int(i) for i in chunk) for chunk in np.array_split(perm, k))
    return FoldPlan(k, folds)


def holdout_split(n: int, val_split: float, seed: int) -> tuple[list[int], list[int]]:
    if n < 2:
        raise ValueError("a hold-out split needs at least two scenes")
    n_val = min(max(1, int(round(val_split * n))), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(int(i) for i in perm[n_val:]), sorted(int(i) for i in perm[:n_val])


@dataclass
class _Batchable:
    inputs: list[np.ndarray]  # one (N, H, W, C) array per model input
    target: np.ndarray  # (N, H, W, 1)
    valid: np.ndarray  # (N, H, W, 1)


def _stack(scenes: Sequence[Scene], variant: ModelVariant, profile: ScaleProfile) -> _Batchable:
    for s in scenes:
        if s.shape != (profile.input_h, profile.input_w):
            raise ShapeError(
                f"scene {s.id} is {s.shape[0]}x{s.shape[1]}, profile expects "
                f"{profile.input_h}x{profile.input_w}"
            )
    cam = np.stack([s.camera_bev.data for s in scenes])
    lid = np.stack([s.lidar_bev.data for s in scenes])
    road = np.stack([s.gt.road & s.gt.valid for s in scenes])[..., None].astype(np.float64)
    valid = np.stack([s.gt.valid for s in scenes])[..., None]
    return _Batchable(prepare_inputs(variant, cam, lid), road, valid)


def _take(data: _Batchable, idx) -> _Batchable:
    return _Batchable([x[idx] for x in data.inputs], data.target[idx], data.valid[idx])


def _evaluate(model: Model, data: _Batchable, loss_fn, batch_size: int) -> tuple[float, ConfusionCounts]:
    """Loss over all valid pixels and pooled counts at threshold 0.5."""
    n = data.target.shape[0]
    preds = []
    with tc.no_grad():
        for start in range(0, n, batch_size):
            idx = slice(start, start + batch_size)
            preds.append(model(_take(data, idx).inputs, training=False).data)
    pred = np.concatenate(preds)
    with tc.no_grad():
        loss = float(loss_fn(Tensor(pred), data.target, data.valid).data)
    positive = quantize_unit(pred) >= 128
    road = data.target > 0.5
    v = data.valid
    counts = ConfusionCounts(
        tp=int(np.count_nonzero(positive & road & v)),
        fp=int(np.count_nonzero(positive & ~road & v)),
        tn=int(np.count_nonzero(~positive & ~road & v)),
        fn=int(np.count_nonzero(~positive & road & v)),
    )
    return loss, counts


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(
    variant: ModelVariant | str,
    profile: ScaleProfile,
    dataset: Sequence[Scene],
    hp: HyperParams,
    val_dataset: Sequence[Scene] | None = None,
    max_steps: int | None = None,
) -> tuple[Checkpoint, TrainingHistory]:
    """Train one model and keep the epoch with the best validation BinaryIoU.

    Without ``val_dataset`` a hold-out of ``hp.val_split`` is carved from
    ``dataset``. Augmentation applies to the training part only.
    ``max_steps`` caps the number of optimiser steps (the epoch in progress
    is still validated).
    """
    if isinstance(variant, str):
        variant = ModelVariant.parse(variant)
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs at least one scene")
    split_ss, aug_ss, shuffle_ss, drop_ss = np.random.SeedSequence(hp.seed).spawn(4)
    if val_dataset is None:
        tr_idx, va_idx = holdout_split(len(dataset), hp.val_split, int(split_ss.generate_state(1)[0]))
        train_scenes = [dataset[i] for i in tr_idx]
        val_scenes = [dataset[i] for i in va_idx]
    else:
        train_scenes, val_scenes = dataset, list(val_dataset)
    train_scenes = augment_dataset(train_scenes, hp.aug_rate, int(aug_ss.generate_state(1)[0]))

    model = build_model(variant, profile, hp.seed, hp.dropout_rate)
    train_data = _stack(train_scenes, variant, profile)
    val_data = _stack(val_scenes, variant, profile)
    loss_fn = LOSS_FUNCTIONS[hp.loss]
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    params = model.parameters()
    adam = AdamState()

    history = TrainingHistory()
    best_state, best_epoch, best_biou = model.state_dict(), 0, -1.0
    n = len(train_scenes)
    for epoch in range(1, hp.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, hp.batch_size):
            if max_steps is not None and history.steps >= max_steps:
                break
            batch = _take(train_data, order[start : start + hp.batch_size])
            model.zero_grad()
            pred = model(batch.inputs, training=True, rng=drop_rng)
            loss = loss_fn(pred, batch.target, batch.valid)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {history.steps + 1} "
                    f"(lr={hp.learning_rate}, optimizer={hp.optimizer})"
                )
            tc.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            if hp.optimizer == "adam":
                adam_step([p.data for p in params], grads, hp.learning_rate, adam)
            else:
                sgd_step([p.data for p in params], grads, hp.learning_rate)
            if not all(np.isfinite(p.data).all() for p in params):
                raise DivergenceError(
                    f"non-finite parameters after epoch {epoch}, step {history.steps + 1} "
                    f"(lr={hp.learning_rate}, optimizer={hp.optimizer})"
                )
            losses.append(value)
            history.steps += 1
        if not losses:
            break

        val_loss, counts = _evaluate(model, val_data, loss_fn, hp.batch_size)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        iou_road, _, biou = binary_iou_from_counts(counts)
        history.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, biou, iou_road))
        log.debug("epoch %d loss %.5f val_loss %.5f val_biou %.4f", epoch, np.mean(losses), val_loss, biou)
        if biou > best_biou:
            best_state, best_epoch, best_biou = model.state_dict(), epoch, biou

    ckpt = Checkpoint(variant, profile, best_state, hp, best_epoch, best_biou)
    return ckpt, history


def training_iou(ckpt: Checkpoint, scenes: Sequence[Scene]) -> tuple[float, float, float]:
    """``(road IoU, background IoU, mean)`` of a checkpoint over ``scenes``, pooled."""
    model = ckpt.build()
    data = _stack(scenes, ckpt.variant, ckpt.profile)
    _, counts = _evaluate(model, data, LOSS_FUNCTIONS[ckpt.hp.loss], ckpt.hp.batch_size)
    return binary_iou_from_counts(counts)


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------


@dataclass
class CrossValResult:
    variant: ModelVariant
    fold_biou: list[float]
    fold_sizes: list[int]

    @property
    def mean_biou(self) -> float:
        return float(sum(self.fold_biou) / len(self.fold_biou))


def _run_fold(args) -> float:
    variant, profile, train_set, val_set, hp = args
    ckpt, _ = train(variant, profile, train_set, hp, val_dataset=val_set)
    return ckpt.val_biou


def cross_validate(
    variant: ModelVariant | str,
    profile: ScaleProfile,
    dataset: Sequence[Scene],
    hp: HyperParams,
    k: int = 10,
    jobs: int = 1,
) -> CrossValResult:
    """Train on each fold's complement and record the fold's validation BinaryIoU."""
    if isinstance(variant, str):
        variant = ModelVariant.parse(variant)
    dataset = list(dataset)
    plan = kfold_split(len(dataset), k, hp.seed)
    tasks = []
    for fold in plan.folds:
        held = set(fold)
        train_set = [s for i, s in enumerate(dataset) if i not in held]
        val_set = [dataset[i] for i in fold]
        tasks.append((variant, profile, train_set, val_set, hp))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_run_fold, tasks))
    else:
        scores = [_run_fold(t) for t in tasks]
    return CrossValResult(variant, scores, [len(f) for f in plan.folds])


GRID_AXES = ("optimizer", "learning_rate", "loss", "dropout_rate", "val_split", "aug_rate")

DEFAULT_GRID: dict[str, list] = {
    "optimizer": ["adam", "sgd"],
    "learning_rate": [1e-2, 1e-3, 1e-4],
    "loss": ["bce", "dice"],
    "dropout_rate": [0.2, 0.35, 0.5],
    "val_split": [0.1, 0.2, 0.3, 0.4, 0.5],
    "aug_rate": [0.0, 0.5, 1.0],
}


@dataclass(frozen=True)
class GridResult:
    index: int
    hp: HyperParams
    val_biou: float
    val_loss: float


def _run_config(args) -> tuple[float, float]:
    variant, profile, dataset, hp = args
    ckpt, history = train(variant, profile, dataset, hp)
    best = next(e for e in history.epochs if e.epoch == ckpt.epoch)
    return best.val_biou, best.val_loss


def grid_search(
    grid: Mapping[str, Sequence],
    variant: ModelVariant | str,
    profile: ScaleProfile,
    dataset: Sequence[Scene],
    base: HyperParams | None = None,
    jobs: int = 1,
) -> list[GridResult]:
    """Train every combination of the grid axes on a single hold-out split.

    Results are ranked by validation BinaryIoU (descending), then validation
    loss, then configuration index.
    """
    base = base or HyperParams()
    for axis, values in grid.items():
        if axis not in GRID_AXES:
            raise ValueError(f"unknown grid axis {axis!r}")
        if len(values) == 0:
            raise ValueError(f"grid axis {axis!r} is empty")
    axes = [a for a in GRID_AXES if a in grid]
    configs = [replace(base, **dict(zip(axes, combo))) for combo in itertools.product(*(grid[a] for a in axes))]
    tasks = [(variant, profile, list(dataset), hp) for hp in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_run_config, tasks))
    else:
        scores = [_run_config(t) for t in tasks]
    results = [GridResult(i, hp, b, l) for i, (hp, (b, l)) in enumerate(zip(configs, scores))]
    results.sort(key=lambda r: (-r.val_biou, r.val_loss, r.index))
    return results

