"""Ground-plane detection and tracking metrics (MODA/MODP, CLEAR-MOT, IDF1, MT/ML).

Matching is by Euclidean distance on the ground plane with a fixed radius.
Localisation quality (MODP, MOTP) is reported as the mean of ``1 - d / radius``
over matched pairs, so 1.0 means every match is exact.

Sequences are ``{frame: [(object_id, x, y), ...]}`` dictionaries.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tracker import gated_assignment

SCHEMA_VERSION = 1

FrameObjects = Sequence[tuple[int, float, float]]
SequenceData = Mapping[int, FrameObjects]


@dataclass(frozen=True)
class EvalConfig:
    match_radius: float = 0.5

    def __post_init__(self):
        if not self.match_radius > 0:
            raise ValueError("match_radius: must be positive")


@dataclass
class FrameMatch:
    pairs: list  # (gt_index, det_index, distance)
    unmatched_gt: list
    unmatched_det: list


@dataclass
class MetricsReport:
    moda: Optional[float] = None
    modp: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    mota: Optional[float] = None
    motp: Optional[float] = None
    idf1: Optional[float] = None
    mt: Optional[float] = None
    ml: Optional[float] = None
    counts: dict = field(default_factory=dict)
    match_radius: float = 0.5

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, **asdict(self)}
        for k, v in doc.items():
            if isinstance(v, float):
                doc[k] = round(v, 10)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _xy(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def match_frame(gt_points, det_points, radius: float) -> FrameMatch:
    """Largest gated one-to-one matching with minimum total distance."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    g, d = _xy(gt_points), _xy(det_points)
    pairs = []
    if len(g) and len(d):
        cost = _dist(g, d)
        pairs = [(i, j, float(cost[i, j])) for i, j in gated_assignment(cost, radius)]
    mg = {p[0] for p in pairs}
    md = {p[1] for p in pairs}
    return FrameMatch(sorted(pairs), [i for i in range(len(g)) if i not in mg],
                      [j for j in range(len(d)) if j not in md])


def detection_metrics(matchings: Sequence[FrameMatch], radius: float) -> dict:
    """MODA, MODP, precision and recall over per-frame matchings."""
    if len(matchings) == 0:
        raise ValueError("need at least one frame")
    tp = sum(len(m.pairs) for m in matchings)
    fp = sum(len(m.unmatched_det) for m in matchings)
    fn = sum(len(m.unmatched_gt) for m in matchings)
    dists = [p[2] for m in matchings for p in m.pairs]
    n_gt = tp + fn
    return {
        "moda": 1.0 - (fp + fn) / n_gt if n_gt else None,
        "modp": float(np.mean([1.0 - d / radius for d in dists])) if dists else (None if not n_gt else 0.0),
        "precision": tp / (tp + fp) if tp + fp else None,
        "recall": tp / n_gt if n_gt else None,
        "tp": tp, "fp": fp, "fn": fn,
    }


def evaluate_detections(gt: SequenceData, det: SequenceData, radius: float) -> dict:
    frames = sorted(set(gt) | set(det))
    matchings = [match_frame([o[1:] for o in gt.get(f, ())], [o[1:] for o in det.get(f, ())], radius)
                 for f in frames]
    return detection_metrics(matchings, radius)


def _clear_matches(gt: SequenceData, pred: SequenceData, radius: float):
    """CLEAR-MOT matching with correspondences carried across frames.

    Yields per frame ``(matches, n_gt, n_pred, switches)`` where matches are
    ``(gt_id, pred_id, distance)``.
    """
    last: dict[int, int] = {}
    for f in sorted(set(gt) | set(pred)):
        g_objs = list(gt.get(f, ()))
        h_objs = list(pred.get(f, ()))
        g_pos = {o[0]: np.array(o[1:], dtype=np.float64) for o in g_objs}
        h_pos = {o[0]: np.array(o[1:], dtype=np.float64) for o in h_objs}
        matches = []
        # keep last correspondences that are still valid
        for gid in sorted(g_pos):
            hid = last.get(gid)
            if hid is not None and hid in h_pos:
                d = float(np.linalg.norm(g_pos[gid] - h_pos[hid]))
                if d <= radius and all(m[1] != hid for m in matches):
                    matches.append((gid, hid, d))
        used_g = {m[0] for m in matches}
        used_h = {m[1] for m in matches}
        rg = [i for i in sorted(g_pos) if i not in used_g]
        rh = [j for j in sorted(h_pos) if j not in used_h]
        switches = 0
        if rg and rh:
            cost = _dist(np.array([g_pos[i] for i in rg]), np.array([h_pos[j] for j in rh]))
            for a, b in gated_assignment(cost, radius):
                gid, hid = rg[a], rh[b]
                if gid in last and last[gid] != hid:
                    switches += 1
                matches.append((gid, hid, float(cost[a, b])))
        for gid, hid, _ in matches:
            last[gid] = hid
        yield f, matches, len(g_objs), len(h_objs), switches


def clear_mot(gt: SequenceData, pred: SequenceData, radius: float) -> dict:
    """MOTA, MOTP and identity switches under the CLEAR protocol."""
    n_gt = n_pred = tp = idsw = 0
    dists = []
    for _, matches, ng, nh, sw in _clear_matches(gt, pred, radius):
        n_gt += ng
        n_pred += nh
        tp += len(matches)
        idsw += sw
        dists.extend(m[2] for m in matches)
    fn = n_gt - tp
    fp = n_pred - tp
    return {
        "mota": 1.0 - (fp + fn + idsw) / n_gt if n_gt else None,
        "motp": float(np.mean([1.0 - d / radius for d in dists])) if dists else (None if not n_gt else 0.0),
        "id_switches": idsw, "tp": tp, "fp": fp, "fn": fn,
    }


def id_metrics(gt: SequenceData, pred: SequenceData, radius: float) -> dict:
    """IDF1 from the optimal trajectory-level identity assignment, plus MT/ML."""
    gt_ids = sorted({o[0] for objs in gt.values() for o in objs})
    pr_ids = sorted({o[0] for objs in pred.values() for o in objs})
    n_gt = sum(len(objs) for objs in gt.values())
    n_pred = sum(len(objs) for objs in pred.values())
    if n_gt == 0:
        return {"idf1": None, "mt": None, "ml": None, "idtp": 0, "idfp": n_pred, "idfn": 0}
    gi = {k: i for i, k in enumerate(gt_ids)}
    pi = {k: i for i, k in enumerate(pr_ids)}
    overlap = np.zeros((len(gt_ids), len(pr_ids)))
    for f in set(gt) & set(pred):
        for og in gt[f]:
            for op in pred[f]:
                if np.hypot(og[1] - op[1], og[2] - op[2]) <= radius:
                    overlap[gi[og[0]], pi[op[0]]] += 1
    idtp = 0.0
    if overlap.size:
        r, c = linear_sum_assignment(-overlap)
        idtp = float(overlap[r, c].sum())
    idfp = n_pred - idtp
    idfn = n_gt - idtp
    idf1 = 2 * idtp / (2 * idtp + idfp + idfn)

    length = {k: 0 for k in gt_ids}
    covered = {k: 0 for k in gt_ids}
    for objs in gt.values():
        for o in objs:
            length[o[0]] += 1
    for _, matches, *_ in _clear_matches(gt, pred, radius):
        for gid, _, _ in matches:
            covered[gid] += 1
    ratios = [covered[k] / length[k] for k in gt_ids]
    mt = sum(r >= 0.8 for r in ratios) / len(ratios)
    ml = sum(r <= 0.2 for r in ratios) / len(ratios)
    return {"idf1": idf1, "mt": mt, "ml": ml, "idtp": int(idtp), "idfp": int(idfp), "idfn": int(idfn)}


def evaluate(gt: SequenceData, tracks: SequenceData, config: EvalConfig = EvalConfig(),
             detections: Optional[SequenceData] = None) -> MetricsReport:
    """Full report. Detection metrics use ``detections`` when given, else track positions."""
    r = config.match_radius
    det = evaluate_detections(gt, detections if detections is not None else tracks, r)
    mot = clear_mot(gt, tracks, r)
    ids = id_metrics(gt, tracks, r)
    return MetricsReport(
        moda=det["moda"], modp=det["modp"], precision=det["precision"], recall=det["recall"],
        mota=mot["mota"], motp=mot["motp"], idf1=ids["idf1"], mt=ids["mt"], ml=ids["ml"],
        counts={"det_tp": det["tp"], "det_fp": det["fp"], "det_fn": det["fn"],
                "tp": mot["tp"], "fp": mot["fp"], "fn": mot["fn"], "id_switches": mot["id_switches"],
                "idtp": ids["idtp"], "idfp": ids["idfp"], "idfn": ids["idfn"]},
        match_radius=r,
    )


def sequence_from_rows(rows: Sequence[Mapping[str, str]]) -> dict[int, list[tuple[int, float, float]]]:
    """Build a sequence from CSV rows of the gt, track or detection formats."""
    seq: dict[int, list] = {}
    for i, row in enumerate(rows):
        if "track_id" in row:
            oid = int(row["track_id"])
        elif "walker_id" in row:
            oid = int(row["walker_id"])
        else:
            oid = i
        seq.setdefault(int(row["frame"]), []).append((oid, float(row["x_world"]), float(row["y_world"])))
    return seq
