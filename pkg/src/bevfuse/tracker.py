"""Frame-to-frame identity association of BEV detections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class Detection:
    frame: int
    world_xy: tuple[float, float]
    score: float
    cell: Optional[tuple[int, int]] = None


@dataclass
class Track:
    id: int
    states: list = field(default_factory=list)  # (frame, (x, y), score)
    misses: int = 0
    hits: int = 0
    confirmed: bool = False
    status: str = "active"

    @property
    def last_xy(self) -> np.ndarray:
        return np.asarray(self.states[-1][1], dtype=np.float64)

    @property
    def last_frame(self) -> int:
        return self.states[-1][0]


@dataclass(frozen=True)
class TrackerConfig:
    gate: float = 1.0
    max_age: int = 3
    min_hits: int = 2

    def __post_init__(self):
        if not self.gate > 0:
            raise ValueError("gate: must be positive")
        if self.max_age < 0 or self.min_hits < 1:
            raise ValueError("max_age: must be >= 0 (and min_hits >= 1)")


def gated_assignment(cost: np.ndarray, gate: float) -> list[tuple[int, int]]:
    """Largest one-to-one matching with every pair ``<= gate``, then least total cost.

    Forbidden pairs get a penalty larger than any sum of allowed costs, which
    makes the min-cost solution lexicographic in (cardinality, cost).
    """
    cost = np.atleast_2d(np.asarray(cost, dtype=np.float64))
    if cost.size == 0:
        return []
    allowed = cost <= gate
    if not allowed.any():
        return []
    big = 1.0 + 2.0 * float(np.abs(cost[allowed]).sum())
    work = np.where(allowed, cost, big)
    rows, cols = linear_sum_assignment(work)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if allowed[r, c]]


def associate(tracks: Sequence[Track], detections: Sequence[Detection], gate: float):
    """Match tracks (by last position) to detections.

    Returns ``(matches, unmatched_track_indices, unmatched_detection_indices)``;
    ``matches`` holds ``(track_index, detection_index)`` pairs.
    """
    if not gate > 0:
        raise ValueError("gate must be positive")
    if not tracks or not detections:
        return [], list(range(len(tracks))), list(range(len(detections)))
    t_xy = np.array([t.last_xy for t in tracks])
    d_xy = np.array([d.world_xy for d in detections], dtype=np.float64)
    cost = np.linalg.norm(t_xy[:, None, :] - d_xy[None, :, :], axis=-1)
    matches = sorted(gated_assignment(cost, gate))
    mt = {m[0] for m in matches}
    md = {m[1] for m in matches}
    return (matches, [i for i in range(len(tracks)) if i not in mt],
            [j for j in range(len(detections)) if j not in md])


class OutOfOrderFrameError(ValueError):
    pass


class Tracker:
    """Constant-position tracker: nearest-position gating plus optimal matching."""

    def __init__(self, config: TrackerConfig = TrackerConfig()):
        self.config = config
        self.tracks: list[Track] = []
        self.finished: list[Track] = []
        self.next_id = 1
        self.frame: Optional[int] = None

    def step(self, frame: int, detections: Sequence[Detection]) -> list[tuple[int, tuple[float, float], float]]:
        """Advance one frame; returns ``(track_id, xy, score)`` for confirmed tracks hit this frame."""
        if self.frame is not None and frame <= self.frame:
            raise OutOfOrderFrameError(f"frame {frame} after frame {self.frame}")
        self.frame = frame
        active = sorted(self.tracks, key=lambda t: t.id)
        matches, lost, fresh = associate(active, detections, self.config.gate)
        out = []
        for ti, di in matches:
            trk, det = active[ti], detections[di]
            trk.states.append((frame, tuple(det.world_xy), det.score))
            trk.hits += 1
            trk.misses = 0
            if trk.hits >= self.config.min_hits:
                trk.confirmed = True
        for ti in lost:
            trk = active[ti]
            trk.misses += 1
            if not trk.confirmed:
                trk.hits = 0
            if not trk.confirmed or trk.misses > self.config.max_age:
                trk.status = "terminated"
        for di in fresh:
            det = detections[di]
            trk = Track(self.next_id, [(frame, tuple(det.world_xy), det.score)], hits=1)
            trk.confirmed = self.config.min_hits <= 1
            self.next_id += 1
            active.append(trk)
        self.tracks = [t for t in active if t.status == "active"]
        self.finished.extend(t for t in active if t.status != "active")
        for trk in self.tracks:
            if trk.confirmed and trk.last_frame == frame:
                out.append((trk.id, trk.states[-1][1], trk.states[-1][2]))
        return sorted(out)

    def confirmed_tracks(self) -> list[Track]:
        return sorted((t for t in self.finished + self.tracks if t.confirmed), key=lambda t: t.id)

    def rows(self) -> list[tuple[int, int, float, float, float]]:
        """All states of confirmed tracks as ``(frame, id, x, y, score)``, frame-major."""
        rows = [(f, t.id, xy[0], xy[1], s) for t in self.confirmed_tracks() for f, xy, s in t.states]
        return sorted(rows)


def run_tracker(frames: Sequence[tuple[int, Sequence[Detection]]], config: TrackerConfig = TrackerConfig()):
    trk = Tracker(config)
    for frame, dets in frames:
        trk.step(frame, dets)
    return trk.rows()
