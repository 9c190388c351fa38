"""Training objectives: weighted cross-entropy, log dice, and their blend.

The dice objective treats the batch as one pooled volume per class and,
by default, scores foreground classes only; with the default numerator
factor 2 a perfect prediction reaches loss 0 exactly, while factor 1
reproduces the coefficient without the doubling. Cross-entropy averages
over pixels so the learning rate is independent of image size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ndtensor as nd
from .errors import DataError, LabelError, ParameterError, ShapeError
from .ndtensor import Tensor

_LOG_CLAMP = 1e-12


@dataclass
class LossConfig:
    class_weights: Optional[Sequence[float]] = None  # None: uniform
    lambda_ce: float = 0.5
    lambda_dice: float = 0.5
    epsilon: float = 1e-5
    dice_numerator_factor: float = 2.0
    dice_include_background: bool = False

    def validate(self) -> None:
        if self.lambda_ce < 0 or self.lambda_dice < 0:
            raise ParameterError("loss weights must be nonnegative")
        if self.lambda_ce + self.lambda_dice <= 0:
            raise ParameterError("at least one loss weight must be positive")
        if self.epsilon <= 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if float(self.dice_numerator_factor) not in (1.0, 2.0):
            raise ParameterError(f"dice numerator factor must be 1 or 2, got {self.dice_numerator_factor}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.ndim != 1 or (w <= 0).any():
                raise ParameterError("class weights must be a flat list of positive reals")

    def weights_for(self, num_classes: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(num_classes, dtype=np.float64)
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (num_classes,):
            raise ParameterError(f"{w.size} class weights for {num_classes} classes")
        return w


def one_hot(t: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """Binary map per class, class axis inserted at position 1."""
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {t.dtype}")
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        bad = int(t.min()) if t.min() < 0 else int(t.max())
        raise LabelError(f"label {bad} outside 0..{num_classes - 1}")
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[t], -1, 1)


def _check_pair(p: Tensor, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if p.ndim < 2:
        raise ShapeError(f"probability map must be [N, C, spatial...], got shape {p.shape}")
    if t.shape != (p.shape[0],) + p.shape[2:]:
        raise ShapeError(f"labels shape {t.shape} does not match probabilities {p.shape}")
    return t


def cross_entropy_loss(p: Tensor, t: np.ndarray, cfg: LossConfig) -> Tensor:
    """Mean over pixels of -w_t(x) log p(x, t(x)), probabilities clamped."""
    t = _check_pair(p, t)
    c = p.shape[1]
    w = cfg.weights_for(c)
    target = Tensor(one_hot(t, c, dtype=p.dtype), dtype=p.dtype)
    weight_map = Tensor(w[t].astype(p.dtype), dtype=p.dtype)
    p_true = nd.sum_(nd.mul(nd.clamp(p, _LOG_CLAMP, None), target), axes=1)
    weighted = nd.mul(nd.log(p_true), weight_map)
    return nd.mul(nd.mean(weighted), -1.0)


def dice_loss(p: Tensor, t: np.ndarray, cfg: LossConfig) -> Tensor:
    """Sum over classes of w_i log(2 - d_i) with the soft dice d_i.

    d_i = (f * sum(t_i p_i) + eps) / (sum(t_i) + sum(p_i) + eps), pooled
    over the whole batch. Since d_i stays in [0, 1], the log argument
    stays in [1, 2] and every term is bounded by log 2.
    """
    t = _check_pair(p, t)
    c = p.shape[1]
    w = cfg.weights_for(c)
    target = one_hot(t, c, dtype=p.dtype)
    f = float(cfg.dice_numerator_factor)
    eps = float(cfg.epsilon)
    first = 0 if cfg.dice_include_background else 1
    total = None
    for i in range(first, c):
        t_i = target[:, i]
        p_i = p[:, i]
        overlap = nd.sum_(nd.mul(p_i, Tensor(t_i, dtype=p.dtype)))
        denom = nd.add(nd.sum_(p_i), float(t_i.sum()) + eps)
        d_i = nd.div(nd.add(nd.mul(overlap, f), eps), denom)
        term = nd.mul(nd.log(nd.sub(2.0, d_i)), float(w[i]))
        total = term if total is None else nd.add(total, term)
    return total


def combined_loss(p: Tensor, t: np.ndarray, cfg: LossConfig) -> Tensor:
    ce = nd.mul(cross_entropy_loss(p, t, cfg), float(cfg.lambda_ce))
    dc = nd.mul(dice_loss(p, t, cfg), float(cfg.lambda_dice))
    return nd.add(ce, dc)


LOSS_FUNCTIONS = {
    "ce": cross_entropy_loss,
    "dice": dice_loss,
    "dice_ce": combined_loss,
}


def select_loss(kind: str):
    try:
        return LOSS_FUNCTIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown loss '{kind}'; choose from {sorted(LOSS_FUNCTIONS)}") from None


def compute_class_weights(label_volumes, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights normalized so they sum to num_classes.

    Classes absent from the data get the largest weight seen among the
    present ones; a weight must exist for every class the model predicts.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    total = 0
    for volume in label_volumes:
        v = np.asarray(volume)
        if v.size == 0:
            continue
        if v.min() < 0 or v.max() >= num_classes:
            raise LabelError(f"label volume contains values outside 0..{num_classes - 1}")
        counts += np.bincount(v.ravel().astype(np.int64), minlength=num_classes)
        total += v.size
    if total == 0:
        raise DataError("cannot derive class weights from an empty label set")
    freq = counts / float(total)
    present = freq > 0
    inv = np.zeros(num_classes, dtype=np.float64)
    inv[present] = 1.0 / freq[present]
    weights = np.zeros(num_classes, dtype=np.float64)
    weights[present] = inv[present] * num_classes / inv[present].sum()
    weights[~present] = weights[present].max()
    return weights
