"""Cross-entropy, focal loss and the multi-class balanced focal loss.

All losses consume probabilities (after softmax) laid out as ``N_pix × C``
and one-hot targets of the same shape. Probabilities are clamped to
``[clamp_eps, 1 - clamp_eps]`` before any logarithm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, softmax_channelwise

__all__ = [
    "LossConfig",
    "class_ratios",
    "class_weights",
    "cross_entropy",
    "focal_loss",
    "mcb_focal_loss",
    "one_hot",
    "pixel_rows",
    "segmentation_loss",
    "weight_curve",
]

LOSS_KINDS = ("ce", "fl", "mcb-fl")


@dataclass(frozen=True)
class LossConfig:
    """Loss hyper-parameters. ``gamma`` defaults to 2, the usual focal-loss setting."""

    alpha: float = 3.0
    gamma: float = 2.0
    alpha_t: float = 1.0
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.alpha_t <= 1:
            raise ValueError(f"alpha_t must lie in (0, 1], got {self.alpha_t}")


def class_ratios(labels, num_classes: int) -> np.ndarray:
    """Per-image class proportions ``t_j / sum_k t_k``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label map")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label ids must lie in [0, {num_classes})")
    counts = np.bincount(labels.reshape(-1).astype(np.int64), minlength=num_classes)
    return counts / counts.sum()


def class_weights(ratios, alpha: float) -> np.ndarray:
    """``alpha ** -r`` for each class ratio ``r``; bounded by ``[1/alpha, 1]``."""
    return np.power(float(alpha), -np.asarray(ratios, dtype=np.float64))


def one_hot(labels, num_classes: int) -> np.ndarray:
    flat = np.asarray(labels).reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= num_classes):
        raise ValueError(f"label ids must lie in [0, {num_classes})")
    out = np.zeros((flat.size, num_classes))
    out[np.arange(flat.size), flat] = 1.0
    return out


def pixel_rows(probs: Tensor) -> Tensor:
    """Reshape ``N×C×H×W`` to ``(N·H·W)×C`` (row-major pixel order)."""
    n, c, h, w = probs.shape
    return probs.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def _check(probs: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != probs.shape:
        raise ShapeError(f"probs {probs.shape} and one-hot labels {labels.shape} disagree")
    return labels.astype(probs.dtype, copy=False)


def _weighted_focal(probs, onehot, pixel_weights, gamma, eps) -> Tensor:
    p_t = (probs * onehot).sum(axis=1).clip(eps, 1.0 - eps)
    modulating = (1.0 - p_t) ** gamma
    return -(modulating * p_t.log() * pixel_weights).mean()


def cross_entropy(probs: Tensor, labels, cfg: LossConfig | None = None) -> Tensor:
    eps = (cfg or LossConfig()).clamp_eps
    onehot = _check(probs, labels)
    logp = probs.clip(eps, 1.0 - eps).log()
    return -(logp * onehot).sum(axis=1).mean()


def focal_loss(probs: Tensor, labels, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    onehot = _check(probs, labels)
    return _weighted_focal(probs, onehot, cfg.alpha_t, cfg.gamma, cfg.clamp_eps)


def mcb_focal_loss(probs: Tensor, labels, ratios, cfg: LossConfig | None = None) -> Tensor:
    """Focal loss with class weight ``alpha ** -r_j`` from the image's class ratios."""
    cfg = cfg or LossConfig()
    onehot = _check(probs, labels)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (probs.shape[1],):
        raise ShapeError(f"{ratios.shape[0] if ratios.ndim else 0} ratios for {probs.shape[1]} classes")
    weights = (onehot @ class_weights(ratios, cfg.alpha)).astype(probs.dtype)
    return _weighted_focal(probs, onehot, weights, cfg.gamma, cfg.clamp_eps)


def segmentation_loss(logits: Tensor, labels, kind: str, cfg: LossConfig | None = None) -> Tensor:
    """Batch loss on ``N×C×H×W`` logits against ``N×H×W`` label maps.

    Class ratios for ``mcb-fl`` are computed per image. Since every image
    contributes the same pixel count, the pixel mean equals the mean of the
    per-image losses.
    """
    cfg = cfg or LossConfig()
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    probs = pixel_rows(softmax_channelwise(logits))
    onehot = one_hot(labels, c).astype(probs.dtype)
    if kind == "ce":
        return cross_entropy(probs, onehot, cfg)
    if kind == "fl":
        return focal_loss(probs, onehot, cfg)
    if kind == "mcb-fl":
        ratios = np.stack([class_ratios(lab, c) for lab in labels])
        per_pixel = class_weights(ratios, cfg.alpha)[
            np.repeat(np.arange(n), h * w), labels.reshape(-1)
        ].astype(probs.dtype)
        return _weighted_focal(probs, onehot, per_pixel, cfg.gamma, cfg.clamp_eps)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")


def weight_curve(alpha: float, n_samples: int) -> list[tuple[float, float]]:
    """``(r, alpha ** -r)`` at ``n_samples`` evenly spaced ratios in ``[0, 1]``."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    r = np.linspace(0.0, 1.0, n_samples)
    return list(zip(r.tolist(), class_weights(r, alpha).tolist()))
