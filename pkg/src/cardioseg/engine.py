"""Training loop, cross-validation folds, and whole-study inference.

The optimizer is plain SGD with classical momentum (v <- m v + g,
p <- p - lr v) and a stepped learning-rate schedule. Every stochastic
choice is derived from the run seed: epoch shuffles from (seed, epoch),
dropout from (seed, epoch, step), and each sample's augmentation from a
hash of (seed, patient, phase, epoch, slice). Reruns are therefore
bitwise identical, which the test suite leans on.

2D training consumes slice stacks (the segmented slice plus its
neighbors as channels); 3D training consumes whole fixed-depth volumes.
Inference runs on the preprocessed grid and maps labels back onto each
study's native grid before any metric sees them.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import layers, losses, metrics, ndtensor as nd
from .data.augment import AugmentConfig, augment, sample_seed
from .data.dataset import parse_kv_lines, stack_slices
from .data.preprocess import PreprocessConfig, preprocess_study, restore_labels
from .data.volume import VolumeStudy
from .errors import DataError, FormatError, NumericalError, ParameterError
from .losses import LossConfig, select_loss
from .models import ModelConfig, SegmentationModel, build_model, load_checkpoint, save_checkpoint
from .ndtensor import Tensor


# ---------------------------------------------------------------------------
# optimizer and schedule

def sgd_step(params: Dict[str, Tensor], velocities: Dict[str, np.ndarray],
             lr: float, momentum: float) -> None:
    """v <- momentum v + grad, p <- p - lr v; missing grads count as zero."""
    for name, p in params.items():
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocities[name] = v
        np.multiply(v, momentum, out=v)
        if p.grad is not None:
            v += p.grad
        p.data -= lr * v


def lr_at_epoch(epoch: int, initial_lr: float, factor: float = 10.0,
                every: int = 30) -> float:
    if epoch < 0:
        raise ParameterError(f"epoch must be nonnegative, got {epoch}")
    if factor <= 0 or every < 1:
        raise ParameterError(f"invalid schedule: factor {factor}, every {every}")
    return initial_lr / factor ** (epoch // every)


def clip_gradients(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# folds

@dataclass
class FoldSplit:
    fold_index: int
    train_ids: Tuple[str, ...]
    val_ids: Tuple[str, ...]


def make_folds(patient_ids: Sequence[str], folds: int, seed: int = 0) -> List[FoldSplit]:
    """Deterministic shuffled split into near-equal validation folds."""
    ids = sorted(set(patient_ids))
    if folds < 2:
        raise ParameterError(f"need at least 2 folds, got {folds}")
    if len(ids) < folds:
        raise ParameterError(f"{len(ids)} patients cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(order, folds)
    splits = []
    for i, part in enumerate(parts):
        val = {ids[j] for j in part}
        splits.append(FoldSplit(fold_index=i,
                                train_ids=tuple(s for s in ids if s not in val),
                                val_ids=tuple(sorted(val))))
    return splits


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    dims: int = 2
    loss: str = "dice_ce"
    epochs: int = 10
    batch_size: Optional[int] = None  # None: 8 in 2D, 4 in 3D
    slices: int = 3                   # 2D context stack depth, odd
    initial_lr: float = 1e-3
    momentum: float = 0.99
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 30
    grad_clip: Optional[float] = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    prep: PreprocessConfig = field(default_factory=PreprocessConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 8 if self.dims == 2 else 4

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ParameterError(f"dims must be 2 or 3, got {self.dims}")
        if self.loss not in losses.LOSS_FUNCTIONS:
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError(f"batch size must be positive, got {self.batch_size}")
        if self.slices < 1 or self.slices % 2 == 0:
            raise ParameterError(f"slice stack must be odd, got {self.slices}")
        if self.initial_lr < 0:
            raise ParameterError(f"learning rate must be nonnegative, got {self.initial_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ParameterError("invalid learning-rate schedule")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ParameterError(f"gradient clip must be positive, got {self.grad_clip}")
        self.model.validate()
        self.loss_cfg.validate()
        self.prep.validate()
        self.aug.validate()
        if self.model.dims != self.dims:
            raise ParameterError(f"model dims {self.model.dims} != training dims {self.dims}")
        if self.dims == 2 and self.model.in_channels != self.slices:
            raise ParameterError(f"2D model wants {self.model.in_channels} input channels "
                                 f"but the slice stack is {self.slices}")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_dice: Optional[float]


@dataclass
class TrainResult:
    history: List[EpochStats]
    best_epoch: int
    best_metric: float
    checkpoint_path: Optional[str]
    class_weights: np.ndarray
    model: SegmentationModel


# ---------------------------------------------------------------------------
# training

def _gather_samples(prepped: List[VolumeStudy], dims: int) -> List[Tuple[int, int]]:
    """(study index, slice index) pairs; 3D uses one sample per study."""
    samples = []
    for si, study in enumerate(prepped):
        if dims == 2:
            samples.extend((si, z) for z in range(study.image.shape[0]))
        else:
            samples.append((si, 0))
    return samples


def _build_batch(cfg: TrainConfig, prepped: List[VolumeStudy],
                 picked: Sequence[Tuple[int, int]], epoch: int):
    xs, ts = [], []
    for si, z in picked:
        study = prepped[si]
        if cfg.dims == 2:
            image, lab = stack_slices(study.image, cfg.slices, z, study.labels)
        else:
            image, lab = study.image[None], study.labels
        seed = sample_seed(cfg.seed, study.patient_id, study.phase or "", epoch, z)
        image, lab = augment(image, lab, cfg.aug, np.random.default_rng(seed))
        xs.append(image.astype(np.float32))
        ts.append(lab)
    return np.stack(xs), np.stack(ts)


def _loss_components(probs: Tensor, targets: np.ndarray, cfg: LossConfig):
    with nd.no_grad():
        ce = losses.cross_entropy_loss(probs, targets, cfg).item()
        dc = losses.dice_loss(probs, targets, cfg).item()
    return ce, dc


def _validation_dice(model: SegmentationModel, validation: Sequence[VolumeStudy],
                     cfg: TrainConfig) -> float:
    scores = []
    for study in validation:
        pred = predict_study(model, study, cfg.prep, slices=cfg.slices)
        per_class = [metrics.dice_score(pred.labels == c, study.labels == c)
                     for c in range(1, cfg.model.num_classes)]
        scores.append(float(np.mean(per_class)))
    return float(np.mean(scores))


def train(cfg: TrainConfig, studies: Sequence[VolumeStudy],
          validation: Optional[Sequence[VolumeStudy]] = None,
          out_dir: Optional[str] = None) -> TrainResult:
    """Fit a model; returns history and writes best checkpoint + meta."""
    cfg.validate()
    if not studies:
        raise DataError("no training studies")
    for s in studies:
        if s.labels is None:
            raise DataError(f"study {s.study_id()} has no labels")

    prepped = [preprocess_study(s, cfg.prep, fix_z=(cfg.dims == 3))[0] for s in studies]
    loss_cfg = cfg.loss_cfg
    if loss_cfg.class_weights is None:
        weights = losses.compute_class_weights([p.labels for p in prepped],
                                               cfg.model.num_classes)
        loss_cfg = dataclasses.replace(loss_cfg, class_weights=tuple(weights))
    class_weights = loss_cfg.weights_for(cfg.model.num_classes)

    model = build_model(cfg.model, seed=cfg.seed)
    loss_fn = select_loss(cfg.loss)
    velocities: Dict[str, np.ndarray] = {}
    samples = _gather_samples(prepped, cfg.dims)
    batch_size = cfg.resolved_batch_size()

    history: List[EpochStats] = []
    best_metric = -np.inf
    best_epoch = -1
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(cfg.epochs):
        model.train()
        lr = lr_at_epoch(epoch, cfg.initial_lr, cfg.lr_decay_factor, cfg.lr_decay_every)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        step_losses = []
        for step, start in enumerate(range(0, len(order), batch_size)):
            picked = [samples[i] for i in order[start:start + batch_size]]
            x_np, t_np = _build_batch(cfg, prepped, picked, epoch)
            drop_rng = np.random.default_rng([cfg.seed, 104729, epoch, step])
            with nd.Tape():
                x = Tensor(x_np, dtype=model.dtype)
                probs = layers.softmax_channels(model.forward(x, rng=drop_rng))
                loss = loss_fn(probs, t_np, loss_cfg)
                value = loss.item()
                if not np.isfinite(value):
                    ce, dc = _loss_components(probs, t_np, loss_cfg)
                    raise NumericalError(
                        f"non-finite loss {value} at epoch {epoch} batch {step} "
                        f"(cross-entropy {ce}, dice {dc})")
                nd.backward(loss)
                if cfg.grad_clip is not None:
                    clip_gradients(model.params, cfg.grad_clip)
                sgd_step(model.params, velocities, lr, cfg.momentum)
                nd.zero_grads(model.params.values())
            step_losses.append(value)

        train_loss = float(np.mean(step_losses)) if step_losses else float("nan")
        val_dice = None
        if validation:
            val_dice = _validation_dice(model.eval(), validation, cfg)
        history.append(EpochStats(epoch=epoch, lr=lr, train_loss=train_loss,
                                  val_dice=val_dice))
        metric = val_dice if val_dice is not None else -train_loss
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            if out_dir is not None:
                ckpt_path = os.path.join(out_dir, "best.ckpt")
                save_checkpoint(model, ckpt_path)
                write_meta(ckpt_path + ".meta", cfg, epoch,
                           val_dice if val_dice is not None else float("nan"))

    if out_dir is not None:
        with open(os.path.join(out_dir, "history.csv"), "w", encoding="utf-8") as fh:
            fh.write(history_lines(history))
    return TrainResult(history=history, best_epoch=best_epoch, best_metric=best_metric,
                       checkpoint_path=ckpt_path, class_weights=class_weights, model=model)


def history_lines(history: Sequence[EpochStats]) -> str:
    lines = ["epoch,lr,train_loss,val_dice"]
    for h in history:
        vd = "nan" if h.val_dice is None else f"{h.val_dice:.6f}"
        lines.append(f"{h.epoch},{h.lr:.8g},{h.train_loss:.6f},{vd}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoint metadata (enough to rebuild the network and its input grid)

def write_meta(path: str, cfg: TrainConfig, epoch: int, val_dice: float) -> None:
    m, p = cfg.model, cfg.prep
    spacing = "none" if p.target_spacing is None else ",".join(str(v) for v in p.target_spacing)
    lines = [
        "# checkpoint companion; key = value",
        f"dims = {m.dims}",
        f"in_channels = {m.in_channels}",
        f"num_classes = {m.num_classes}",
        f"base_width = {m.base_width}",
        f"depth = {m.depth}",
        f"max_width = {'none' if m.max_width is None else m.max_width}",
        f"dropout_last = {m.dropout_last}",
        f"dropout_second_last = {m.dropout_second_last}",
        f"slices = {cfg.slices}",
        f"target_spacing = {spacing}",
        f"size = {p.size[0]},{p.size[1]}",
        f"z_slices = {p.z_slices}",
        f"apply_clahe = {int(p.apply_clahe)}",
        f"clahe_bins = {p.clahe_bins}",
        f"clahe_tiles = {p.clahe_tiles[0]},{p.clahe_tiles[1]}",
        f"clahe_clip = {p.clahe_clip}",
        f"percentiles = {p.percentiles[0]},{p.percentiles[1]}",
        f"epoch = {epoch}",
        f"val_dice = {val_dice}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_meta(path: str) -> Tuple[ModelConfig, PreprocessConfig, int]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            kv = parse_kv_lines(fh.read())
        spacing = kv["target_spacing"]
        target = None if spacing == "none" else tuple(float(v) for v in spacing.split(","))
        max_width = kv["max_width"]
        model = ModelConfig(
            dims=int(kv["dims"]), in_channels=int(kv["in_channels"]),
            num_classes=int(kv["num_classes"]), base_width=int(kv["base_width"]),
            depth=int(kv["depth"]),
            max_width=None if max_width == "none" else int(max_width),
            dropout_last=float(kv["dropout_last"]),
            dropout_second_last=float(kv["dropout_second_last"]))
        prep = PreprocessConfig(
            target_spacing=target,
            percentiles=tuple(float(v) for v in kv["percentiles"].split(",")),
            size=tuple(int(v) for v in kv["size"].split(",")),
            z_slices=int(kv["z_slices"]),
            clahe_bins=int(kv["clahe_bins"]),
            clahe_tiles=tuple(int(v) for v in kv["clahe_tiles"].split(",")),
            clahe_clip=float(kv["clahe_clip"]),
            apply_clahe=bool(int(kv["apply_clahe"])))
        slices = int(kv["slices"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"unusable checkpoint metadata in {path}: {exc}") from exc
    model.validate()
    prep.validate()
    return model, prep, slices


def load_model_for_inference(ckpt_path: str) -> Tuple[SegmentationModel, PreprocessConfig, int]:
    model_cfg, prep_cfg, slices = read_meta(str(ckpt_path) + ".meta")
    model = load_checkpoint(ckpt_path, model_cfg)
    return model.eval(), prep_cfg, slices


# ---------------------------------------------------------------------------
# inference

def predict_study(model: SegmentationModel, study: VolumeStudy,
                  prep: PreprocessConfig, slices: Optional[int] = None,
                  batch_size: int = 8) -> VolumeStudy:
    """Segment one study and return labels on its native grid.

    Ties in the class scores resolve to the lower label (first argmax).
    3D accepts whatever depth preprocessing produces; nothing pads Z.
    """
    model.eval()
    cfg = model.config
    prepped, record = preprocess_study(study, prep, fix_z=False)
    volume = prepped.image
    with nd.no_grad():
        if cfg.dims == 2:
            n = cfg.in_channels if slices is None else slices
            if n != cfg.in_channels:
                raise ParameterError(f"model expects {cfg.in_channels} slice channels, got {n}")
            zs = volume.shape[0]
            planes = []
            for start in range(0, zs, batch_size):
                stackz = [stack_slices(volume, n, z)[0]
                          for z in range(start, min(start + batch_size, zs))]
                x = Tensor(np.stack(stackz).astype(np.float32), dtype=model.dtype)
                planes.append(np.argmax(model.forward(x).data, axis=1))
            pred = np.concatenate(planes, axis=0)
        else:
            x = Tensor(volume[None, None].astype(np.float32), dtype=model.dtype)
            pred = np.argmax(model.forward(x).data, axis=1)[0]
    restored = restore_labels(pred.astype(np.int64), record)
    return VolumeStudy(image=study.image, labels=restored, spacing=study.spacing,
                       patient_id=study.patient_id, phase=study.phase)
