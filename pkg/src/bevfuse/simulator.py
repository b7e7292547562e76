"""Deterministic synthetic multi-camera scenes.

Cameras sit on a ring around the grid and look at its center. Walkers move at
constant speed with a small random heading drift and bounce off the grid
borders. Instead of images, each camera gets a feature map: every visible
walker leaves an isotropic Gaussian bump carrying its identity signature at
its foot pixel, plus a bias channel that is 1 on the bump support.

All randomness comes from numpy's PCG64 ``Generator`` (``np.random.default_rng``):
the scene stream is seeded with ``seed``; per-view render noise uses the seed
sequence ``[seed, frame, camera_id]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .geometry import BevGrid, CameraModel, cells_of, intrinsics, look_at, project_points, world_to_image
from .tensorio import fmt_float, write_bevf, write_rows


def _default_grid() -> BevGrid:
    return BevGrid(0.0, 0.0, 0.25, 120, 120)


@dataclass(frozen=True)
class SceneConfig:
    n_cameras: int = 4
    ring_radius: float = 20.0
    camera_height: float = 8.0
    image_w: int = 320
    image_h: int = 240
    focal: float = 160.0
    grid: BevGrid = field(default_factory=_default_grid)
    n_walkers: int = 10
    speed_min: float = 0.2
    speed_max: float = 0.8
    turn_sigma: float = 0.2
    margin: float = 1.0
    fps: float = 2.0
    n_frames: int = 60
    occluders: tuple = ()  # ((x, y, radius), ...)
    noise_sigma: float = 0.05
    channels: int = 8
    bump_radius: float = 3.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("n_cameras", self.n_cameras >= 1, "must be >= 1"),
            ("ring_radius", self.ring_radius > 0, "must be positive"),
            ("camera_height", self.camera_height > 0, "must be positive"),
            ("image_w", self.image_w > 0, "must be positive"),
            ("image_h", self.image_h > 0, "must be positive"),
            ("focal", self.focal > 0, "must be positive"),
            ("n_walkers", self.n_walkers >= 0, "must be >= 0"),
            ("speed_min", 0 <= self.speed_min <= self.speed_max, "need 0 <= speed_min <= speed_max"),
            ("turn_sigma", self.turn_sigma >= 0, "must be >= 0"),
            ("margin", 0 <= 2 * self.margin < min(self.grid.extent_x, self.grid.extent_y),
             "must leave room inside the grid"),
            ("fps", self.fps > 0, "must be positive"),
            ("n_frames", self.n_frames >= 1, "must be >= 1"),
            ("noise_sigma", self.noise_sigma >= 0, "must be >= 0"),
            ("channels", self.channels >= 2, "need a bias channel plus at least one signature channel"),
            ("bump_radius", self.bump_radius > 0, "must be positive"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"{name}: {msg}")
        for occ in self.occluders:
            if len(occ) != 3 or not occ[2] > 0:
                raise ValueError("occluders: each entry is [x, y, radius] with radius > 0")


@dataclass
class Scene:
    config: SceneConfig
    grid: BevGrid
    cameras: list[CameraModel]
    trajectories: np.ndarray  # (n_walkers, n_frames, 2)
    signatures: np.ndarray    # (n_walkers, channels - 1)
    occluders: np.ndarray     # (n_occ, 3)
    visibility: np.ndarray    # (n_frames, n_walkers, n_cameras) bool


def ring_cameras(cfg: SceneConfig) -> list[CameraModel]:
    center = cfg.grid.center
    K = intrinsics(cfg.focal, cfg.focal, cfg.image_w / 2, cfg.image_h / 2)
    cams = []
    for k in range(cfg.n_cameras):
        ang = 2 * math.pi * k / cfg.n_cameras + math.pi / 4
        eye = [center[0] + cfg.ring_radius * math.cos(ang),
               center[1] + cfg.ring_radius * math.sin(ang), cfg.camera_height]
        R, t = look_at(eye, [center[0], center[1], 0.0])
        cams.append(CameraModel(k, K, R, t, cfg.image_w, cfg.image_h))
    return cams


def _walk(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    g = cfg.grid
    lo = np.array([g.origin_x, g.origin_y]) + cfg.margin
    hi = np.array([g.origin_x + g.extent_x, g.origin_y + g.extent_y]) - cfg.margin
    traj = np.zeros((cfg.n_walkers, cfg.n_frames, 2))
    for w in range(cfg.n_walkers):
        pos = lo + rng.random(2) * (hi - lo)
        heading = rng.random() * 2 * math.pi
        speed = cfg.speed_min + rng.random() * (cfg.speed_max - cfg.speed_min)
        turns = rng.standard_normal(cfg.n_frames) * cfg.turn_sigma
        traj[w, 0] = pos
        for f in range(1, cfg.n_frames):
            heading += turns[f]
            vel = np.array([math.cos(heading), math.sin(heading)])
            pos = pos + vel * speed / cfg.fps
            for ax in range(2):
                if pos[ax] < lo[ax]:
                    pos[ax] = 2 * lo[ax] - pos[ax]
                    vel[ax] = -vel[ax]
                elif pos[ax] > hi[ax]:
                    pos[ax] = 2 * hi[ax] - pos[ax]
                    vel[ax] = -vel[ax]
            pos = np.clip(pos, lo, hi)
            heading = math.atan2(vel[1], vel[0])
            traj[w, f] = pos
    return traj


def segment_hits_disc(a: np.ndarray, b: np.ndarray, disc) -> bool:
    """True when the ground segment ``a -> b`` passes within ``radius`` of the disc center."""
    c = np.asarray(disc[:2], dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom == 0 else float(np.clip((c - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + s * ab - c)) <= disc[2]


def is_visible(cam: CameraModel, xy, occluders) -> bool:
    """Foot point inside the frustum and no occluder disc on the ground ray."""
    if world_to_image(cam, [xy[0], xy[1], 0.0]) is None:
        return False
    c = cam.center[:2]
    p = np.asarray(xy, dtype=np.float64)
    return not any(segment_hits_disc(c, p, occ) for occ in occluders)


def gen_scene(cfg: SceneConfig) -> Scene:
    cams = ring_cameras(cfg)
    for cam in cams:
        if world_to_image(cam, [*cfg.grid.center, 0.0]) is None:
            raise ValueError(f"ring_radius: camera {cam.id} cannot see the grid")
    rng = np.random.default_rng(cfg.seed)
    signatures = 0.2 + 0.8 * rng.random((cfg.n_walkers, cfg.channels - 1))
    traj = _walk(cfg, rng)
    occ = np.asarray(cfg.occluders, dtype=np.float64).reshape(-1, 3)
    vis = np.zeros((cfg.n_frames, cfg.n_walkers, len(cams)), dtype=bool)
    for f in range(cfg.n_frames):
        for w in range(cfg.n_walkers):
            for k, cam in enumerate(cams):
                vis[f, w, k] = is_visible(cam, traj[w, f], occ)
    return Scene(cfg, cfg.grid, cams, traj, signatures, occ, vis)


def bump_radius_px(scene: Scene, cam: CameraModel, xy) -> float:
    """Image-space bump radius, inversely proportional to camera distance."""
    c = cam.center
    ref = math.dist(c, [*scene.grid.center, 0.0])
    d = math.dist(c, [xy[0], xy[1], 0.0])
    return scene.config.bump_radius * ref / d


def foot_pixels(scene: Scene, frame: int, camera_id: int) -> dict[int, tuple[float, float]]:
    """Sub-pixel foot location of every walker visible in this view."""
    cam = scene.cameras[camera_id]
    out = {}
    for w in range(scene.trajectories.shape[0]):
        if scene.visibility[frame, w, camera_id]:
            xy = scene.trajectories[w, frame]
            out[w] = world_to_image(cam, [xy[0], xy[1], 0.0])
    return out


def render_features(scene: Scene, frame: int, camera_id: int, walkers=None) -> np.ndarray:
    """Feature map ``(C, H, W)`` float32 for one view.

    Channel 0 is the bias channel; channels 1.. carry the summed signatures.
    ``walkers`` restricts rendering to a subset of walker indices.
    """
    cfg = scene.config
    if not 0 <= frame < cfg.n_frames:
        raise IndexError(f"frame {frame} outside [0, {cfg.n_frames})")
    if not 0 <= camera_id < len(scene.cameras):
        raise IndexError(f"unknown camera {camera_id}")
    cam = scene.cameras[camera_id]
    H, W, C = cfg.image_h, cfg.image_w, cfg.channels
    fm = np.zeros((C, H, W), dtype=np.float64)
    occupied = np.zeros((H, W), dtype=bool)
    for w, (u, v) in foot_pixels(scene, frame, camera_id).items():
        if walkers is not None and w not in walkers:
            continue
        radius = bump_radius_px(scene, cam, scene.trajectories[w, frame])
        r0, c0 = int(math.floor(v)), int(math.floor(u))
        reach = int(math.floor(radius))
        dr, dc = np.mgrid[-reach:reach + 1, -reach:reach + 1]
        inside = dr ** 2 + dc ** 2 <= radius ** 2
        rr, cc = r0 + dr[inside], c0 + dc[inside]
        keep = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        rr, cc = rr[keep], cc[keep]
        sigma = radius / 2.0
        weight = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2.0 * sigma ** 2))
        fm[1:, rr, cc] += scene.signatures[w][:, None] * weight[None, :]
        occupied[rr, cc] = True
    fm[0] = occupied
    if cfg.noise_sigma > 0 and occupied.any():
        rng = np.random.default_rng([cfg.seed, frame, camera_id])
        rows, cols = np.nonzero(occupied)
        fm[1:, rows, cols] += cfg.noise_sigma * rng.standard_normal((C - 1, len(rows)))
    return fm.astype(np.float32)


def gt_rows(scene: Scene) -> list[tuple[int, int, float, float]]:
    n_w, n_f, _ = scene.trajectories.shape
    return [(f, w, float(scene.trajectories[w, f, 0]), float(scene.trajectories[w, f, 1]))
            for f in range(n_f) for w in range(n_w)]


def gt_heatmaps(grid: BevGrid, n_frames: int, rows) -> np.ndarray:
    """Binary occupancy targets ``(n_frames, H, W)`` from ``(frame, id, x, y)`` rows."""
    heat = np.zeros((n_frames, grid.height, grid.width), dtype=np.uint8)
    for f, _, x, y in rows:
        rc, inside = cells_of(grid, np.array([[x, y]]))
        if inside[0]:
            heat[int(f), rc[0, 0], rc[0, 1]] = 1
    return heat


def export_ground_truth(scene: Scene, out_dir=None):
    """Ground-truth rows and heatmaps; also writes ``gt.csv`` when ``out_dir`` is given."""
    rows = gt_rows(scene)
    heat = gt_heatmaps(scene.grid, scene.config.n_frames, rows)
    if out_dir is not None:
        write_rows(Path(out_dir) / "gt.csv", ["frame", "walker_id", "x_world", "y_world"],
                   [(f, w, fmt_float(x), fmt_float(y)) for f, w, x, y in rows])
    return rows, heat


def feature_name(frame: int, cam: int) -> str:
    return f"f{frame:04d}_c{cam:02d}.bevf"


def write_scene(scene: Scene, out_dir, threads: int = 1) -> Path:
    """Serialise to ``scene.json``, ``calibration.json``, ``gt.csv`` and ``features/``.

    Rendering is spread over ``threads`` workers; every view has its own noise
    stream, so the files do not depend on the thread count.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .geometry import save_calibration

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    cfgmod.dump(scene.config, out / "scene.json")
    save_calibration(out / "calibration.json", scene.cameras)
    export_ground_truth(scene, out)
    views = [(f, cam.id) for f in range(scene.config.n_frames) for cam in scene.cameras]

    def work(view):
        f, c = view
        write_bevf(out / "features" / feature_name(f, c), render_features(scene, f, c))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, views))
    return out


def occluded_fraction(scene: Scene) -> float:
    """Share of in-frustum walker/camera pairs hidden by an occluder."""
    total = hidden = 0
    for f in range(scene.config.n_frames):
        for w in range(scene.trajectories.shape[0]):
            for cam in scene.cameras:
                xy = scene.trajectories[w, f]
                if world_to_image(cam, [xy[0], xy[1], 0.0]) is None:
                    continue
                total += 1
                hidden += not scene.visibility[f, w, cam.id]
    return hidden / total if total else 0.0


def occlusion_layout(cfg: SceneConfig, target: float = 0.3, radius: float = 1.5,
                     max_occluders: int = 40) -> tuple:
    """Seeded occluder discs added one by one until ``target`` of views are hidden."""
    rng = np.random.default_rng([cfg.seed, 7919])
    g = cfg.grid
    occ: list = []
    for _ in range(max_occluders):
        x = g.origin_x + g.extent_x * (0.15 + 0.7 * rng.random())
        y = g.origin_y + g.extent_y * (0.15 + 0.7 * rng.random())
        occ.append((float(x), float(y), radius))
        probe = dataclasses.replace(cfg, occluders=tuple(occ))
        if occluded_fraction(gen_scene(probe)) >= target:
            break
    return tuple(occ)
