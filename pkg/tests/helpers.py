"""Shared fixtures for building random but well-posed cameras and scenes."""

import numpy as np

from bevfuse.geometry import BevGrid, CameraModel, intrinsics, look_at


def random_camera(rng, width=320, height=240, cam_id=0, target_box=5.0):
    """A camera 3-15 m above ground looking down at a point near the origin."""
    while True:
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(4, 20)
        eye = np.array([dist * np.cos(ang), dist * np.sin(ang), rng.uniform(3, 15)])
        target = np.array([*rng.uniform(-target_box, target_box, 2), 0.0])
        if np.linalg.norm(eye[:2] - target[:2]) < 1.0:
            continue
        R, t = look_at(eye, target)
        f = rng.uniform(150, 500)
        K = intrinsics(f, f * rng.uniform(0.9, 1.1), width / 2 + rng.uniform(-10, 10),
                       height / 2 + rng.uniform(-10, 10))
        return CameraModel(cam_id, K, R, t, width, height)


def overhead_camera(grid: BevGrid, height_m=10.0, cam_id=0):
    """Axis-aligned nadir camera with exactly one pixel per grid cell.

    Image column ``j`` sees grid column ``j``; image row ``i`` sees grid row
    ``grid.height - 1 - i``.
    """
    c = grid.center
    R = np.diag([1.0, -1.0, -1.0])
    eye = np.array([c[0], c[1], height_m])
    f = height_m / grid.cell_size
    K = intrinsics(f, f, grid.width / 2, grid.height / 2)
    return CameraModel(cam_id, K, R, -R @ eye, grid.width, grid.height)


def ground_points_in_view(cam, rng, n):
    """World ground points whose projections land in the image."""
    out = []
    Ginv = np.linalg.inv(cam.K @ np.column_stack([cam.R[:, 0], cam.R[:, 1], cam.t]))
    while len(out) < n:
        uv = rng.uniform([0, 0], [cam.image_w, cam.image_h], size=(4 * n, 2))
        h = np.column_stack([uv, np.ones(len(uv))]) @ Ginv.T
        xy = h[:, :2] / h[:, 2:3]
        pts = np.column_stack([xy, np.zeros(len(xy))])
        depth = (pts @ cam.R.T + cam.t)[:, 2]
        out.extend(pts[depth > 1e-3])
    return np.array(out[:n])
