"""Pinhole camera math, ground-plane homographies and BEV grid indexing.

Conventions used throughout the package:

* World frame is right-handed with the ground plane at ``z = 0``.
* ``p_cam = R @ p_world + t`` (world to camera).
* Image coordinates are ``(u, v)`` with ``u`` along the width. Pixel ``(col, row)``
  covers ``[col, col + 1) x [row, row + 1)``, so its center is at ``+0.5``.
* BEV cells are ``(row, col)`` with ``row`` along the grid height (world ``y``)
  and ``col`` along the width (world ``x``). Fractional cell coordinates use the
  same ordering and the same floor convention as pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SINGULAR_COND = 1e12


class SingularConfigurationError(ValueError):
    """Raised when a camera/ground configuration has no usable homography."""


@dataclass(frozen=True, eq=False)
class CameraModel:
    id: int
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_w: int
    image_h: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() >= 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError(f"camera {self.id}: R must be a proper rotation")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError(f"camera {self.id}: K must be upper-triangular")
        if not (K[0, 0] > 0 and K[1, 1] > 0 and K[2, 2] == 1):
            raise ValueError(f"camera {self.id}: K needs positive focal lengths and K[2,2] == 1")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError(f"camera {self.id}: image size must be positive")
        for name, arr in (("K", K), ("R", R), ("t", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates."""
        return -self.R.T @ self.t

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (self.id == other.id and self.image_w == other.image_w
                and self.image_h == other.image_h
                and np.array_equal(self.K, other.K) and np.array_equal(self.R, other.R)
                and np.array_equal(self.t, other.t))

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "K": [float(v) for v in self.K.ravel()],
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
            "width": int(self.image_w),
            "height": int(self.image_h),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(id=int(d["id"]), K=d["K"], R=d["R"], t=d["t"],
                   image_w=int(d["width"]), image_h=int(d["height"]))


@dataclass(frozen=True)
class BevGrid:
    origin_x: float
    origin_y: float
    cell_size: float
    width: int
    height: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size: must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width: grid width and height must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent_x(self) -> float:
        return self.width * self.cell_size

    @property
    def extent_y(self) -> float:
        return self.height * self.cell_size

    @property
    def center(self) -> np.ndarray:
        return np.array([self.origin_x + self.extent_x / 2, self.origin_y + self.extent_y / 2])

    def cell_centers(self) -> np.ndarray:
        """World ``(x, y)`` of every cell center, shape ``(height, width, 2)``."""
        cols = self.origin_x + (np.arange(self.width) + 0.5) * self.cell_size
        rows = self.origin_y + (np.arange(self.height) + 0.5) * self.cell_size
        xx, yy = np.meshgrid(cols, rows)
        return np.stack([xx, yy], axis=-1)

    def to_dict(self) -> dict:
        return {"origin_x": self.origin_x, "origin_y": self.origin_y,
                "cell_size": self.cell_size, "width": self.width, "height": self.height}


def world_to_image(cam: CameraModel, p_world: Sequence[float]) -> Optional[tuple[float, float]]:
    """Project a world point to sub-pixel ``(u, v)``; ``None`` if not visible."""
    uv, visible = project_points(cam, np.asarray(p_world, dtype=np.float64)[None, :])
    if not visible[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def project_points(cam: CameraModel, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`world_to_image` for ``(N, 3)`` points.

    Returns ``(uv, visible)``; ``uv`` rows for invisible points are NaN.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    p_cam = pts @ cam.R.T + cam.t
    depth = p_cam[:, 2]
    uvw = p_cam @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / uvw[:, 2:3]
    visible = ((depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.image_w)
               & (uv[:, 1] >= 0) & (uv[:, 1] < cam.image_h))
    uv[~visible] = np.nan
    return uv, visible


def pixels_to_ground(cam: CameraModel, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Intersect the rays through ``(N, 2)`` pixels with ``z = 0``.

    Returns ``(xy, hit)``; rays parallel to or leaving the ground are not hits.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    rays_cam = np.linalg.solve(cam.K, np.vstack([uv.T, np.ones(len(uv))]))
    rays = (cam.R.T @ rays_cam).T
    c = cam.center
    dz = rays[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -c[2] / dz
        hit = (np.abs(dz) > 1e-12) & (s > 0) & np.isfinite(s)
        xy = c[:2] + s[:, None] * rays[:, :2]
    xy[~hit] = np.nan
    return xy, hit


def image_to_ground(cam: CameraModel, pixel: Sequence[float]) -> Optional[np.ndarray]:
    """Back-project a pixel onto the ground plane; ``None`` for degenerate rays."""
    xy, hit = pixels_to_ground(cam, np.asarray(pixel, dtype=np.float64)[None, :])
    if not hit[0]:
        return None
    return np.array([xy[0, 0], xy[0, 1], 0.0])


def world_ground_homography(cam: CameraModel) -> np.ndarray:
    """3x3 map from ground ``(x, y, 1)`` to homogeneous image coordinates."""
    return cam.K @ np.column_stack([cam.R[:, 0], cam.R[:, 1], cam.t])


def grid_from_world(grid: BevGrid) -> np.ndarray:
    """Affine map from world ``(x, y, 1)`` to fractional ``(row, col, 1)``."""
    s = 1.0 / grid.cell_size
    return np.array([[0.0, s, -grid.origin_y * s],
                     [s, 0.0, -grid.origin_x * s],
                     [0.0, 0.0, 1.0]])


def ground_homography(cam: CameraModel, grid: BevGrid) -> np.ndarray:
    """Homography taking image pixels ``(u, v, 1)`` to fractional ``(row, col, 1)``."""
    G = world_ground_homography(cam)
    if not np.all(np.isfinite(G)) or np.linalg.cond(G) > SINGULAR_COND:
        raise SingularConfigurationError(
            f"camera {cam.id}: ground plane passes through the optical center")
    return grid_from_world(grid) @ np.linalg.inv(G)


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply ``H`` to ``(N, 2)`` points with homogeneous normalisation."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    out = np.hstack([pts, np.ones((len(pts), 1))]) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return out[:, :2] / out[:, 2:3]


def cell_of(grid: BevGrid, world_xy: Sequence[float]) -> Optional[tuple[int, int]]:
    col = math.floor((world_xy[0] - grid.origin_x) / grid.cell_size)
    row = math.floor((world_xy[1] - grid.origin_y) / grid.cell_size)
    if 0 <= row < grid.height and 0 <= col < grid.width:
        return row, col
    return None


def cells_of(grid: BevGrid, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`cell_of`: returns ``(rc, inside)`` with int64 ``rc``."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    with np.errstate(invalid="ignore"):
        col = np.floor((xy[:, 0] - grid.origin_x) / grid.cell_size)
        row = np.floor((xy[:, 1] - grid.origin_y) / grid.cell_size)
        inside = (row >= 0) & (row < grid.height) & (col >= 0) & (col < grid.width)
    rc = np.zeros((len(xy), 2), dtype=np.int64)
    rc[inside, 0] = row[inside]
    rc[inside, 1] = col[inside]
    return rc, inside


def world_of(grid: BevGrid, row: int, col: int) -> tuple[float, float]:
    """World ``(x, y)`` of a cell center."""
    return (grid.origin_x + (col + 0.5) * grid.cell_size,
            grid.origin_y + (row + 0.5) * grid.cell_size)


def look_at(eye: Sequence[float], target: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``eye`` facing ``target``.

    Image ``v`` points toward world ``-z`` wherever the view is not vertical.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.vstack([right, down, fwd])
    return R, -R @ eye


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def load_calibration(path) -> list[CameraModel]:
    with open(path) as fh:
        doc = json.load(fh)
    return [CameraModel.from_dict(c) for c in doc["cameras"]]


def save_calibration(path, cameras: Sequence[CameraModel]) -> None:
    doc = {"cameras": [c.to_dict() for c in cameras]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
