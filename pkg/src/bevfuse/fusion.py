"""Multi-view aggregation of per-camera BEV features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BevGrid, CameraModel


@dataclass
class FusedFeature:
    data: np.ndarray
    rule: str

    @property
    def shape(self):
        return self.data.shape


def _check_shapes(arrays: Sequence[np.ndarray]) -> None:
    if not arrays:
        raise ValueError("need at least one view")
    ref = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != ref:
            raise ValueError(f"view {i} has shape {a.shape}, expected {ref}")


def weighted_aggregate(views: Sequence[tuple[np.ndarray, np.ndarray]], normalize: bool = False) -> FusedFeature:
    """Confidence-weighted sum ``sum_s f_s * C_s`` (confidence broadcast over channels).

    With ``normalize`` the sum is divided by ``sum_s C_s`` where that is positive.
    """
    feats = [np.asarray(f, dtype=np.float64) for f, _ in views]
    confs = [np.asarray(c, dtype=np.float64) for _, c in views]
    _check_shapes(feats)
    _check_shapes(confs)
    if confs[0].shape != feats[0].shape[1:]:
        raise ValueError(f"confidence shape {confs[0].shape} does not match feature {feats[0].shape}")
    out = np.zeros_like(feats[0])
    for f, c in zip(feats, confs):
        out += f * c[None]
    if normalize:
        total = np.sum(confs, axis=0)
        nz = total > 0
        out[:, nz] /= total[nz]
    return FusedFeature(out, "weighted-normalized" if normalize else "weighted")


def concat_fuse(views: Sequence[np.ndarray]) -> FusedFeature:
    """Stack views along channels in the given (camera id) order."""
    arrs = [np.asarray(v) for v in views]
    _check_shapes(arrs)
    return FusedFeature(np.concatenate(arrs, axis=0), "concat")


def unweighted_mean(views: Sequence[np.ndarray]) -> FusedFeature:
    """Plain average of the per-camera BEV features."""
    arrs = [np.asarray(v, dtype=np.float64) for v in views]
    _check_shapes(arrs)
    return FusedFeature(np.mean(arrs, axis=0), "unweighted-mean")


def intersection_mean(views: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> FusedFeature:
    """Average kept only where every camera has a valid projection."""
    fused = unweighted_mean(views).data
    keep = np.all(np.asarray(masks) > 0, axis=0)
    fused[:, ~keep] = 0.0
    return FusedFeature(fused, "intersection-mean")


def density_weights_from_depth(cam: CameraModel, grid: BevGrid) -> np.ndarray:
    """Per-cell weight ``d_min / d`` from optical-center-to-cell-center distance.

    The distance is measured in 3-D to the cell center on the ground, so it is
    monotone in ground distance and never zero for a camera above the plane.
    """
    centers = grid.cell_centers()
    c = cam.center
    d = np.sqrt((centers[..., 0] - c[0]) ** 2 + (centers[..., 1] - c[1]) ** 2 + c[2] ** 2)
    d = np.maximum(d, 1e-9)
    return d.min() / d
