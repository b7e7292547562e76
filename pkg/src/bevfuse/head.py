"""Two-layer temporal BEV detection head with analytic gradients.

``concat(f_t, f_prev)`` -> 5x5 conv, dilation 2, zero padding -> ReLU -> 1x1 conv
-> sigmoid. Everything is plain numpy in float64.

BEV inputs are mostly empty, so the convolution is computed by scattering
each nonzero input cell through the 25 taps instead of gathering a window
for every output cell. The result is exact; only the cost depends on the
input support.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.special import expit

from .geometry import BevGrid, world_of
from .tracker import Detection

KSIZE = 5
DILATION = 2
REACH = (KSIZE // 2) * DILATION


@dataclass
class HeadParams:
    w1: np.ndarray  # (F, 2C, 5, 5)
    b1: np.ndarray  # (F,)
    w2: np.ndarray  # (F,)
    b2: np.ndarray  # (1,)

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def copy(self) -> "HeadParams":
        return HeadParams(*[a.copy() for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def zeros(cls, channels: int, hidden: int = 16) -> "HeadParams":
        return cls(np.zeros((hidden, 2 * channels, KSIZE, KSIZE)), np.zeros(hidden),
                   np.zeros(hidden), np.zeros(1))

    def save(self, json_path, meta: dict | None = None) -> Path:
        """Write ``<name>.json`` (shapes + metadata) and ``<name>.bin`` (raw ``<f8``)."""
        json_path = Path(json_path)
        blob = json_path.with_suffix(".bin")
        blob.write_bytes(b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays()))
        doc = {
            "format": "bevfuse-head/1",
            "blob": blob.name,
            "order": [f.name for f in fields(self)],
            "shapes": {f.name: list(getattr(self, f.name).shape) for f in fields(self)},
            "meta": meta or {},
        }
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return blob

    @classmethod
    def load(cls, json_path) -> "HeadParams":
        json_path = Path(json_path)
        doc = json.loads(json_path.read_text())
        raw = np.frombuffer((json_path.parent / doc["blob"]).read_bytes(), dtype="<f8")
        out, pos = {}, 0
        for name in doc["order"]:
            shape = tuple(doc["shapes"][name])
            n = int(np.prod(shape))
            out[name] = raw[pos:pos + n].reshape(shape).astype(np.float64)
            pos += n
        if pos != len(raw):
            raise ValueError(f"{json_path}: blob length does not match declared shapes")
        return cls(**out)


def init_params(channels: int, hidden: int = 16, seed: int = 0, prior: float = 0.01) -> HeadParams:
    """He-style init; the output bias starts at the logit of ``prior``."""
    rng = np.random.default_rng(seed)
    cin = 2 * channels
    fan_in = cin * KSIZE * KSIZE
    w1 = rng.standard_normal((hidden, cin, KSIZE, KSIZE)) * np.sqrt(2.0 / fan_in)
    w2 = rng.standard_normal(hidden) * np.sqrt(1.0 / hidden)
    b2 = np.array([np.log(prior / (1.0 - prior))])
    return HeadParams(w1, np.zeros(hidden), w2, b2)


@dataclass
class ForwardCache:
    x: np.ndarray         # (2C, H, W)
    taps: np.ndarray      # (25, n_support) flat indices into the padded output grid
    xs: np.ndarray        # (2C, n_support) nonzero input columns
    pre: np.ndarray       # (F, H, W)
    hidden: np.ndarray    # (F, H, W)
    logits: np.ndarray    # (H, W)


def _stack_inputs(params: HeadParams, f_t: np.ndarray, f_prev: np.ndarray) -> np.ndarray:
    f_t = np.asarray(f_t, dtype=np.float64)
    f_prev = np.asarray(f_prev, dtype=np.float64)
    if f_t.shape != f_prev.shape or f_t.ndim != 3:
        raise ValueError(f"current {f_t.shape} and previous {f_prev.shape} features must match")
    if 2 * f_t.shape[0] != params.in_channels:
        raise ValueError(f"head expects {params.in_channels // 2} channels, got {f_t.shape[0]}")
    return np.concatenate([f_t, f_prev], axis=0)


def _tap_targets(rows: np.ndarray, cols: np.ndarray, H: int, W: int) -> np.ndarray:
    """Flat padded-output index each input cell feeds through each tap."""
    Wp = W + 2 * REACH
    ky, kx = np.divmod(np.arange(KSIZE * KSIZE), KSIZE)
    r = rows[None, :] - DILATION * ky[:, None] + 2 * REACH
    c = cols[None, :] - DILATION * kx[:, None] + 2 * REACH
    return r * Wp + c


def forward_pass(params: HeadParams, f_t, f_prev) -> ForwardCache:
    x = _stack_inputs(params, f_t, f_prev)
    Cin, H, W = x.shape
    F = params.hidden
    rows, cols = np.nonzero(np.any(x != 0, axis=0))
    xs = x[:, rows, cols]
    taps = _tap_targets(rows, cols, H, W)
    # (F*25, Cin) @ (Cin, n): per-tap contributions, scattered with bincount
    w_taps = params.w1.reshape(F, Cin, KSIZE * KSIZE).transpose(0, 2, 1).reshape(-1, Cin)
    contrib = (w_taps @ xs).reshape(F, -1)
    n_pad = (H + 2 * REACH) * (W + 2 * REACH)
    flat_taps = taps.ravel()
    out = np.empty((F, n_pad))
    for f in range(F):
        out[f] = np.bincount(flat_taps, weights=contrib[f], minlength=n_pad)
    pre = out.reshape(F, H + 2 * REACH, W + 2 * REACH)[:, REACH:REACH + H, REACH:REACH + W]
    pre = pre + params.b1[:, None, None]
    hidden = np.maximum(pre, 0.0)
    logits = np.tensordot(params.w2, hidden, axes=1) + params.b2[0]
    return ForwardCache(x, taps, xs, pre, hidden, logits)


def head_logits(params: HeadParams, f_t, f_prev) -> np.ndarray:
    return forward_pass(params, f_t, f_prev).logits


def probabilities(logits: np.ndarray) -> np.ndarray:
    """Sigmoid kept strictly inside (0, 1)."""
    return np.clip(expit(logits), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def head_forward(params: HeadParams, f_t, f_prev) -> np.ndarray:
    """Occupancy probability map."""
    return probabilities(head_logits(params, f_t, f_prev))


def head_backward(params: HeadParams, f_t, f_prev, upstream: np.ndarray,
                  input_grads: bool = True, cache: ForwardCache | None = None):
    """Gradients of ``sum(upstream * logits)``.

    Returns ``(param_grads, (d_f_t, d_f_prev))``; the input pair is ``None``
    when ``input_grads`` is false.
    """
    if cache is None:
        cache = forward_pass(params, f_t, f_prev)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.logits.shape:
        raise ValueError(f"upstream {g.shape} does not match logits {cache.logits.shape}")
    F, Cin = params.hidden, params.in_channels
    H, W = g.shape

    d_b2 = np.array([g.sum()])
    d_w2 = np.tensordot(cache.hidden, g, axes=([1, 2], [0, 1]))
    d_pre = params.w2[:, None, None] * g[None] * (cache.pre > 0)
    d_b1 = d_pre.sum(axis=(1, 2))
    d_pad = np.pad(d_pre, ((0, 0), (REACH, REACH), (REACH, REACH))).reshape(F, -1)
    picked = np.ascontiguousarray(d_pad.T)[cache.taps]  # (25, n, F)
    d_w1 = np.matmul(cache.xs, picked).transpose(2, 1, 0).reshape(params.w1.shape)
    grads = HeadParams(d_w1, d_b1, d_w2, d_b2)
    if not input_grads:
        return grads, None

    # every input cell, zero or not, receives gradient
    d_pad = d_pad.reshape(F, H + 2 * REACH, W + 2 * REACH)
    dx = np.zeros((Cin, H, W))
    for ky in range(KSIZE):
        for kx in range(KSIZE):
            r0, c0 = 2 * REACH - DILATION * ky, 2 * REACH - DILATION * kx
            shifted = d_pad[:, r0:r0 + H, c0:c0 + W].reshape(F, -1)
            dx += (params.w1[:, :, ky, kx].T @ shifted).reshape(Cin, H, W)
    C = Cin // 2
    return grads, (dx[:C], dx[C:])


def sgd_step(params: HeadParams, grads: HeadParams, lr: float) -> HeadParams:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    return HeadParams(*[p - lr * g for p, g in zip(params.arrays(), grads.arrays())])


def decode_detections(p: np.ndarray, grid: BevGrid, threshold: float = 0.5,
                      nms_radius: int = 2, frame: int = 0,
                      logits: np.ndarray | None = None) -> list[Detection]:
    """Strict local maxima at or above ``threshold``, highest score first.

    When ``logits`` are given the local-maximum test runs on them instead of
    on ``p``. The two agree wherever the sigmoid is resolvable, but saturated
    plateaus (``p`` rounded to 1.0) still have a unique peak in logit space.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if nms_radius < 1:
        raise ValueError("nms_radius must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    rank = p if logits is None else np.asarray(logits, dtype=np.float64)
    if rank.shape != p.shape:
        raise ValueError(f"logits {rank.shape} do not match probabilities {p.shape}")
    size = 2 * nms_radius + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[nms_radius, nms_radius] = False
    neigh = maximum_filter(rank, footprint=footprint, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((rank > neigh) & (p >= threshold))
    scores = p[rows, cols]
    order = np.lexsort((cols, rows, -rank[rows, cols]))
    dets = []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        dets.append(Detection(frame, world_of(grid, r, c), float(scores[i]), (r, c)))
    return dets
