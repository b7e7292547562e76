"""Camera-to-BEV feature projection.

Two backends share one contract (``(C, H, W)`` feature map in, ``(C, rows, cols)``
BEV feature out):

* :func:`bilinear_project` inverse-warps every BEV cell back into the image and
  samples it bilinearly. Dense, and it stretches near-field pixels over many cells.
* :func:`spt_project` forward-splats only the nonzero feature pixels onto the
  ground and leaves cells nobody lands in at exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .geometry import BevGrid, CameraModel, cells_of, pixels_to_ground, project_points


@dataclass(frozen=True)
class KernelSpec:
    sigma: float = 1.0
    size: int = 5

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError("size: kernel size must be an odd integer >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma: kernel sigma must be positive")

    def weights(self) -> np.ndarray:
        """Truncated isotropic Gaussian, renormalised to unit sum."""
        r = self.size // 2
        x = np.arange(-r, r + 1, dtype=np.float64)
        g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2.0 * self.sigma ** 2))
        return g / g.sum()


def _check_stride(fm: np.ndarray, cam: CameraModel, stride: int) -> None:
    if fm.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got {fm.shape}")
    if stride < 1 or stride & (stride - 1):
        raise ValueError("feature stride must be a power of two")
    if fm.shape[1] * stride != cam.image_h or fm.shape[2] * stride != cam.image_w:
        raise ValueError(
            f"feature map {fm.shape[1]}x{fm.shape[2]} at stride {stride} does not "
            f"match camera {cam.id} image {cam.image_h}x{cam.image_w}")


def bilinear_project(fm: np.ndarray, cam: CameraModel, grid: BevGrid, stride: int = 1) -> np.ndarray:
    """Dense inverse warp: sample the feature map at every cell center's pixel."""
    fm = np.asarray(fm)
    _check_stride(fm, cam, stride)
    C, Hf, Wf = fm.shape
    centers = grid.cell_centers().reshape(-1, 2)
    pts = np.hstack([centers, np.zeros((len(centers), 1))])
    uv, visible = project_points(cam, pts)
    out = np.zeros((C, grid.height * grid.width), dtype=np.float32)
    if not visible.any():
        return out.reshape(C, grid.height, grid.width)

    idx = np.flatnonzero(visible)
    # feature sample positions, with pixel centers at integer coordinates
    fx = np.clip(uv[idx, 0] / stride - 0.5, 0.0, Wf - 1)
    fy = np.clip(uv[idx, 1] / stride - 0.5, 0.0, Hf - 1)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, Wf - 1)
    y1 = np.minimum(y0 + 1, Hf - 1)
    a = fx - x0
    b = fy - y0
    src = fm.astype(np.float64)
    f00, f01 = src[:, y0, x0], src[:, y0, x1]
    f10, f11 = src[:, y1, x0], src[:, y1, x1]
    # lerp form keeps constant inputs exact
    top = f00 + a * (f01 - f00)
    bot = f10 + a * (f11 - f10)
    out[:, idx] = top + b * (bot - top)
    return out.reshape(C, grid.height, grid.width)


def splat_targets(fm: np.ndarray, cam: CameraModel, grid: BevGrid, stride: int = 1):
    """Locate the nonzero feature pixels that land inside the grid.

    Returns ``(pix_rows, pix_cols, flat_cells)`` for the contributing pixels.
    """
    fm = np.asarray(fm)
    _check_stride(fm, cam, stride)
    rows, cols = np.nonzero(np.any(fm != 0, axis=0))
    if len(rows) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    uv = np.column_stack([(cols + 0.5) * stride, (rows + 0.5) * stride])
    xy, hit = pixels_to_ground(cam, uv)
    rc, inside = cells_of(grid, xy)
    keep = hit & inside
    flat = rc[keep, 0] * grid.width + rc[keep, 1]
    return rows[keep], cols[keep], flat


def spt_project(fm: np.ndarray, cam: CameraModel, grid: BevGrid, stride: int = 1,
                reduce: str = "mean", return_counts: bool = False):
    """Sparse perspective transform.

    Each nonzero feature pixel is carried along its ray to the ground and
    dropped if it misses the grid. Cells with contributors hold their
    channel-wise mean (or max); all other cells are exactly zero.

    Returns ``(bev, mask)`` or ``(bev, mask, counts)``.
    """
    if reduce not in ("mean", "max"):
        raise ValueError(f"unknown splat reduction {reduce!r}")
    fm = np.asarray(fm)
    C = fm.shape[0]
    n_cells = grid.height * grid.width
    pr, pc, flat = splat_targets(fm, cam, grid, stride)
    out = np.zeros((C, n_cells), dtype=np.float32)
    counts = np.zeros(n_cells, dtype=np.int64)
    if len(flat):
        # sparse (cell -> sum, count) accumulator, materialised at the end
        cells, inverse = np.unique(flat, return_inverse=True)
        vals = fm[:, pr, pc].astype(np.float64)
        k = np.bincount(inverse, minlength=len(cells))
        if reduce == "mean":
            acc = np.zeros((C, len(cells)))
            for ch in range(C):
                acc[ch] = np.bincount(inverse, weights=vals[ch], minlength=len(cells))
            acc /= k
        else:
            acc = np.full((C, len(cells)), -np.inf)
            np.maximum.at(acc, (slice(None), inverse), vals)
        out[:, cells] = acc
        counts[cells] = k
    bev = out.reshape(C, grid.height, grid.width)
    mask = make_mask(bev)
    if return_counts:
        return bev, mask, counts.reshape(grid.height, grid.width)
    return bev, mask


def make_mask(bf: np.ndarray) -> np.ndarray:
    """1 where any channel is nonzero (exact comparison), else 0."""
    return np.any(np.asarray(bf) != 0, axis=0).astype(np.uint8)


def confidence_map(mask: np.ndarray, kernel: KernelSpec = KernelSpec()) -> np.ndarray:
    """Correlate the binary mask with the normalised Gaussian, zero-padded.

    The unit-sum normalisation is applied after the correlation, using the
    kernel's own correlated total, so a fully covered neighbourhood gives
    exactly 1.0 regardless of floating-point summation order.
    """
    w = kernel.weights()
    k = kernel.size
    total = correlate(np.ones((k, k)), w, mode="constant", cval=0.0)[k // 2, k // 2]
    conf = correlate(np.asarray(mask, dtype=np.float64), w, mode="constant", cval=0.0) / total
    return np.clip(conf, 0.0, 1.0)
