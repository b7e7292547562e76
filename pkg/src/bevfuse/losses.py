"""Focal-loss objectives for single-view, multi-view and combined training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

P_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    gamma: float = 4.0
    beta: float = 0.1
    variant: str = "printed"  # "printed" | "centernet"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha: must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma: must be non-negative")
        if not self.beta >= 0:
            raise ValueError("beta: must be non-negative")
        if self.variant not in ("printed", "centernet"):
            raise ValueError(f"variant: unknown focal variant {self.variant!r}")


@dataclass
class LossReport:
    l_single: float
    l_multi: float
    l_det: float
    per_camera: list = field(default_factory=list)


def _check(p: np.ndarray, y: np.ndarray, valid: Optional[np.ndarray]):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction {p.shape} and target {y.shape} differ in shape")
    if not np.all((p > 0) & (p < 1)):
        raise ValueError("predictions must lie strictly inside (0, 1)")
    if valid is None:
        v = np.ones_like(p)
    else:
        v = np.asarray(valid, dtype=np.float64)
        if v.shape != p.shape:
            raise ValueError(f"valid mask {v.shape} does not match prediction {p.shape}")
        v = (v > 0).astype(np.float64)
    return p, y, v


def focal_loss_map(p, y, cfg: LossConfig = LossConfig(), valid=None) -> tuple[float, np.ndarray]:
    """Summed focal loss over valid cells and its gradient with respect to ``p``.

    ``printed``:   -a (1-p)^g [y log p + (1-y) log(1-p)]
    ``centernet``: -(1-p)^a log p on positives, -(1-y)^g p^a log(1-p) on negatives

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]`` inside the differentiated function,
    so the gradient is zero where the clamp is active.
    """
    p, y, v = _check(p, y, valid)
    q = np.clip(p, P_EPS, 1.0 - P_EPS)
    inside = ((p >= P_EPS) & (p <= 1.0 - P_EPS)).astype(np.float64)
    a, g = cfg.alpha, cfg.gamma
    lp, lq = np.log(q), np.log1p(-q)
    if cfg.variant == "printed":
        w = a * (1.0 - q) ** g
        inner = y * lp + (1.0 - y) * lq
        cell = -w * inner
        dw = -a * g * (1.0 - q) ** (g - 1.0) if g > 0 else np.zeros_like(q)
        dinner = y / q - (1.0 - y) / (1.0 - q)
        dcell = -(dw * inner + w * dinner)
    else:
        pos = (y >= 1.0).astype(np.float64)
        neg = 1.0 - pos
        cell = -pos * (1.0 - q) ** a * lp - neg * (1.0 - y) ** g * q ** a * lq
        dpos = a * (1.0 - q) ** (a - 1.0) * lp - (1.0 - q) ** a / q
        dneg = a * q ** (a - 1.0) * lq - q ** a / (1.0 - q)
        dcell = pos * dpos - neg * (1.0 - y) ** g * dneg
    loss = float(np.sum(cell * v))
    return loss, dcell * v * inside


def single_view_loss(p_views: Sequence, y_views: Sequence, masks: Sequence,
                     cfg: LossConfig = LossConfig()) -> tuple[float, list[float], list[np.ndarray]]:
    """Sum of per-camera focal losses, each restricted to that camera's mask.

    Returns ``(total, per_camera_losses, per_camera_gradients)``.
    """
    if not (len(p_views) == len(y_views) == len(masks)) or len(p_views) == 0:
        raise ValueError("need the same non-zero number of predictions, targets and masks")
    terms, grads = [], []
    for p, y, m in zip(p_views, y_views, masks):
        loss, grad = focal_loss_map(p, y, cfg, m)
        terms.append(loss)
        grads.append(grad)
    return float(sum(terms)), terms, grads


def combined_loss(l_single: float, l_multi: float, cfg: LossConfig = LossConfig()) -> float:
    return cfg.beta * l_single + l_multi


def logit_gradient(dl_dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Chain a probability-space gradient through the sigmoid."""
    return dl_dp * p * (1.0 - p)
