"""End-to-end pipeline: project -> confidence -> fuse -> head -> decode -> track."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .fusion import concat_fuse, density_weights_from_depth, unweighted_mean, weighted_aggregate
from .geometry import BevGrid, load_calibration
from .head import (HeadParams, decode_detections, forward_pass, head_backward, head_logits, init_params,
                   probabilities, sgd_step)
from .losses import LossConfig, LossReport, combined_loss, focal_loss_map, logit_gradient
from .metrics import EvalConfig
from .projection import KernelSpec, bilinear_project, confidence_map, make_mask, spt_project
from .simulator import SceneConfig, feature_name, gt_heatmaps
from .tensorio import read_bevf, read_rows
from .tracker import Tracker, TrackerConfig

BACKENDS = ("spt", "bilinear")
FUSIONS = ("weighted", "concat", "unweighted-mean")


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 16
    lr: float = 2e-3
    prior: float = 0.01
    threshold: float = 0.5
    nms_radius: int = 2
    train_stride: int = 1

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden: must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr: must be positive")
        if not 0 < self.prior < 1:
            raise ValueError("prior: must be in (0, 1)")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold: must be in (0, 1)")
        if self.nms_radius < 1:
            raise ValueError("nms_radius: must be >= 1")
        if self.train_stride < 1:
            raise ValueError("train_stride: must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    backend: str = "spt"
    fusion: str = "weighted"
    gaussian_conf: bool = True
    depth_weight: bool = True
    normalize_fusion: bool = False
    splat_reduce: str = "mean"
    feature_stride: int = 1
    mc_loss: bool = True
    shared_head: bool = True
    multi_valid: str = "all"
    loss: LossConfig = field(default_factory=LossConfig)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    head: HeadConfig = field(default_factory=HeadConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend: must be one of {BACKENDS}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion: must be one of {FUSIONS}")
        if self.splat_reduce not in ("mean", "max"):
            raise ValueError("splat_reduce: must be 'mean' or 'max'")
        if self.multi_valid not in ("union", "all"):
            raise ValueError("multi_valid: must be 'union' or 'all'")


@dataclass
class SceneData:
    """What the pipeline may read from a scene directory (no ground truth)."""
    root: Path
    grid: BevGrid
    cameras: list
    n_frames: int
    channels: int

    def features(self, frame: int, cam_id: int) -> np.ndarray:
        return read_bevf(self.root / "features" / feature_name(frame, cam_id))

    def inputs(self) -> list[Path]:
        return [self.root / "scene.json", self.root / "calibration.json"] + [
            self.root / "features" / feature_name(f, c.id)
            for f in range(self.n_frames) for c in self.cameras]


def load_scene_dir(root) -> SceneData:
    root = Path(root)
    scfg = cfgmod.load(SceneConfig, root / "scene.json")
    cams = load_calibration(root / "calibration.json")
    return SceneData(root, scfg.grid, cams, scfg.n_frames, scfg.channels)


def load_gt(root, scene: SceneData):
    rows = [(int(r["frame"]), int(r["walker_id"]), float(r["x_world"]), float(r["y_world"]))
            for r in read_rows(Path(root) / "gt.csv")]
    return rows, gt_heatmaps(scene.grid, scene.n_frames, rows)


@dataclass
class FrameViews:
    singles: list        # per-camera BEV features fed to the single-view head
    masks: list          # per-camera validity masks
    fused: np.ndarray    # head input for the multi-view path
    union: np.ndarray    # union of masks


class Preparer:
    """Per-camera projection, confidence and fusion under one pipeline config."""

    def __init__(self, cfg: PipelineConfig, grid: BevGrid, cameras):
        self.cfg = cfg
        self.grid = grid
        self.cameras = list(cameras)
        self.depth = [density_weights_from_depth(c, grid) for c in self.cameras] if cfg.depth_weight else None

    def fused_channels(self, channels: int) -> int:
        return channels * len(self.cameras) if self.cfg.fusion == "concat" else channels

    def project(self, fm: np.ndarray, k: int):
        cam = self.cameras[k]
        if self.cfg.backend == "spt":
            return spt_project(fm, cam, self.grid, self.cfg.feature_stride, self.cfg.splat_reduce)
        bev = bilinear_project(fm, cam, self.grid, self.cfg.feature_stride)
        return bev, make_mask(bev)

    def confidence(self, mask: np.ndarray, k: int) -> np.ndarray:
        conf = confidence_map(mask, self.cfg.kernel) if self.cfg.gaussian_conf else np.ones(mask.shape)
        if self.depth is not None:
            conf = conf * self.depth[k]
        return conf

    def prepare(self, fms) -> FrameViews:
        bevs, masks = [], []
        for k, fm in enumerate(fms):
            bev, mask = self.project(fm, k)
            bevs.append(bev)
            masks.append(mask)
        if self.cfg.fusion == "weighted":
            fused = weighted_aggregate([(b, self.confidence(m, k)) for k, (b, m) in enumerate(zip(bevs, masks))],
                                       normalize=self.cfg.normalize_fusion)
        elif self.cfg.fusion == "concat":
            fused = concat_fuse(bevs)
        else:
            fused = unweighted_mean(bevs)
        singles = bevs
        if self.cfg.fusion == "concat":
            C = bevs[0].shape[0]
            pad = fused.data.shape[0] - C
            singles = [np.concatenate([b, np.zeros((pad,) + b.shape[1:], dtype=b.dtype)]) for b in bevs]
        union = np.any(np.asarray(masks) > 0, axis=0).astype(np.uint8)
        return FrameViews(singles, masks, fused.data.astype(np.float32), union)


def _multi_valid(cfg: PipelineConfig, views: FrameViews):
    return views.union if cfg.multi_valid == "union" else None


def frame_loss_and_grads(cfg: PipelineConfig, params: HeadParams, single_params: Optional[HeadParams],
                         cur: FrameViews, prev: Optional[FrameViews], target: np.ndarray):
    """Detection loss of one frame and gradients for the multi (and single) head."""
    zeros = np.zeros_like(cur.fused)
    f_prev = prev.fused if prev is not None else zeros
    cache = forward_pass(params, cur.fused, f_prev)
    if not np.isfinite(cache.logits).all():
        raise NumericalError("non-finite head output; check the input features for NaN/inf")
    p = probabilities(cache.logits)
    l_multi, dp = focal_loss_map(p, target, cfg.loss, _multi_valid(cfg, cur))
    g_multi, _ = head_backward(params, cur.fused, f_prev, logit_gradient(dp, p), input_grads=False, cache=cache)
    per_cam = []
    g_single = None
    if cfg.mc_loss:
        sp = params if single_params is None else single_params
        for k, (f_s, m_s) in enumerate(zip(cur.singles, cur.masks)):
            f_sp = prev.singles[k] if prev is not None else np.zeros_like(f_s)
            c = forward_pass(sp, f_s, f_sp)
            if not np.isfinite(c.logits).all():
                raise NumericalError(f"non-finite single-view head output for camera {k}")
            ps = probabilities(c.logits)
            l_s, dps = focal_loss_map(ps, target, cfg.loss, m_s)
            g, _ = head_backward(sp, f_s, f_sp, logit_gradient(dps, ps), input_grads=False, cache=c)
            per_cam.append(l_s)
            g_single = g if g_single is None else _add(g_single, g)
    l_single = float(sum(per_cam))
    report = LossReport(l_single, l_multi, combined_loss(l_single, l_multi, cfg.loss), per_cam)
    return report, g_multi, g_single


def _add(a: HeadParams, b: HeadParams, scale: float = 1.0) -> HeadParams:
    return HeadParams(*[x + scale * y for x, y in zip(a.arrays(), b.arrays())])


def prepare_all(cfg: PipelineConfig, scene: SceneData, threads: int = 1) -> list[FrameViews]:
    """Project and fuse every frame; ``pool.map`` keeps frame order, so results are thread-count independent."""
    prep = Preparer(cfg, scene.grid, scene.cameras)

    def work(f):
        return prep.prepare([scene.features(f, c.id) for c in scene.cameras])

    if threads <= 1:
        return [work(f) for f in range(scene.n_frames)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(scene.n_frames)))


def initial_params(cfg: PipelineConfig, scene: SceneData) -> tuple[HeadParams, Optional[HeadParams]]:
    C = Preparer(cfg, scene.grid, scene.cameras).fused_channels(scene.channels)
    params = init_params(C, cfg.head.hidden, cfg.seed, cfg.head.prior)
    single = None
    if cfg.mc_loss and not cfg.shared_head:
        single = init_params(C, cfg.head.hidden, cfg.seed + 1, cfg.head.prior)
    return params, single


def train(cfg: PipelineConfig, scene: SceneData, heat: np.ndarray, epochs: int,
          views: Optional[list[FrameViews]] = None, log=None):
    """Per-frame SGD on ``beta * L_single + L_multi``.

    Frames are visited in a seeded random order each epoch. Returns
    ``(params, single_params, epoch_reports)``.
    """
    if views is None:
        views = prepare_all(cfg, scene)
    params, single = initial_params(cfg, scene)
    frames = list(range(0, scene.n_frames, cfg.head.train_stride))
    lr, beta = cfg.head.lr, cfg.loss.beta
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(frames)
        tot_s = tot_m = tot_d = 0.0
        per_cam = np.zeros(len(scene.cameras))
        for f in order:
            f = int(f)
            prev = views[f - 1] if f > 0 else None
            rep, g_multi, g_single = frame_loss_and_grads(cfg, params, single, views[f], prev, heat[f])
            if not math.isfinite(rep.l_det):
                raise NumericalError(f"non-finite loss at epoch {epoch}, frame {f}")
            if g_single is None:
                params = sgd_step(params, g_multi, lr)
            elif single is None:
                params = sgd_step(params, _add(g_multi, g_single, beta), lr)
            else:
                params = sgd_step(params, g_multi, lr)
                single = sgd_step(single, g_single, lr * beta)
            if not np.isfinite(params.flat()).all() or (single is not None and not np.isfinite(single.flat()).all()):
                raise NumericalError(f"parameters diverged at epoch {epoch}, frame {f}; lower head.lr")
            tot_s += rep.l_single
            tot_m += rep.l_multi
            tot_d += rep.l_det
            if rep.per_camera:
                per_cam += rep.per_camera
        n = len(frames)
        entry = {"epoch": epoch, "l_single": tot_s / n, "l_multi": tot_m / n, "l_det": tot_d / n,
                 "per_camera": [float(x) / n for x in per_cam] if cfg.mc_loss else []}
        history.append(entry)
        if log is not None:
            log(entry)
    return params, single, history


def evaluate_loss(cfg: PipelineConfig, params: HeadParams, single: Optional[HeadParams],
                  views: list[FrameViews], heat: np.ndarray, frames) -> float:
    total = 0.0
    for f in frames:
        prev = views[f - 1] if f > 0 else None
        rep, _, _ = frame_loss_and_grads(cfg, params, single, views[f], prev, heat[f])
        total += rep.l_det
    return total / len(frames)


@dataclass
class RunOutput:
    detections: list      # (frame, x, y, score)
    tracks: list          # (frame, track_id, x, y, score)
    probmaps: list        # per-frame (H, W) float arrays


def run(cfg: PipelineConfig, scene: SceneData, params: HeadParams,
        views: Optional[list[FrameViews]] = None) -> RunOutput:
    if views is None:
        views = prepare_all(cfg, scene)
    expected = views[0].fused.shape[0] if views else scene.channels
    if 2 * expected != params.in_channels:
        raise ValueError(f"params expect {params.in_channels // 2} input channels, pipeline produces {expected}")
    tracker = Tracker(cfg.tracker)
    dets_out, probs = [], []
    for f, cur in enumerate(views):
        prev = views[f - 1].fused if f > 0 else np.zeros_like(cur.fused)
        logits = head_logits(params, cur.fused, prev)
        if not np.isfinite(logits).all():
            raise NumericalError(f"non-finite head output at frame {f}")
        p = probabilities(logits)
        probs.append(p)
        dets = decode_detections(p, scene.grid, cfg.head.threshold, cfg.head.nms_radius, frame=f,
                                 logits=logits)
        dets_out.extend((f, d.world_xy[0], d.world_xy[1], d.score) for d in dets)
        tracker.step(f, dets)
    return RunOutput(dets_out, tracker.rows(), probs)


def config_json(cfg) -> str:
    return json.dumps(cfgmod.to_dict(cfg), sort_keys=True)
