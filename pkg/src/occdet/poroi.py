"""Part occlusion-aware RoI pooling.

A proposal is split into five body parts, each part and the whole proposal
are max-pooled to a fixed ``H x W`` grid, a small convolutional unit scores
the visibility of every part, and the final feature is the whole-proposal
pool plus the score-weighted part pools.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Box, DegenerateBoxError, GTObject, occlusion_fraction
from .losses import EPS

NUM_PARTS = 5
_EDGE_TOL = 1e-9


class RoIError(ValueError):
    """The RoI cannot be pooled on the given feature map."""


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray           # (C, H_f, W_f)
    spatial_scale: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or min(data.shape) <= 0:
            raise ValueError(f"feature map must be a non-empty C x H x W grid, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("feature map holds non-finite values")
        if not self.spatial_scale > 0:
            raise ValueError("spatial_scale must be positive")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PartLayout:
    """Five parts as fractional ``(left, top, right, bottom)`` of a proposal."""

    parts: tuple[tuple[float, float, float, float], ...]

    def __post_init__(self):
        parts = tuple(tuple(float(v) for v in p) for p in self.parts)
        if len(parts) != NUM_PARTS or any(len(p) != 4 for p in parts):
            raise ValueError("a part layout needs five (left, top, right, bottom) tuples")
        for p in parts:
            if not all(0.0 <= v <= 1.0 for v in p) or p[2] <= p[0] or p[3] <= p[1]:
                raise ValueError(f"invalid part fractions {p}")
        boxes = [Box(*p) for p in parts]
        for i in range(NUM_PARTS):
            for j in range(i + 1, NUM_PARTS):
                inter = _overlap(boxes[i], boxes[j])
                if inter > 1e-12:
                    raise ValueError(f"parts {i + 1} and {j + 1} overlap")
        if not math.isclose(sum(b.area for b in boxes), 1.0, abs_tol=1e-9):
            raise ValueError("parts do not tile the proposal")
        object.__setattr__(self, "parts", parts)

    def boxes(self, proposal: Box) -> list[Box]:
        w, h = proposal.width, proposal.height
        return [Box(proposal.x_min + l * w, proposal.y_min + t * h,
                    proposal.x_min + r * w, proposal.y_min + b * h)
                for l, t, r, b in self.parts]


def _overlap(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(w, 0.0) * max(h, 0.0)


def default_part_layout() -> PartLayout:
    """Head strip over the top 20%, torso and legs split into left/right halves
    over the next 40% and the bottom 40%."""
    return PartLayout((
        (0.0, 0.0, 1.0, 0.2),
        (0.0, 0.2, 0.5, 0.6),
        (0.5, 0.2, 1.0, 0.6),
        (0.0, 0.6, 0.5, 1.0),
        (0.5, 0.6, 1.0, 1.0),
    ))


def _bin_edges(lo: float, hi: float, n: int, limit: int) -> list[tuple[int, int]]:
    edges = [lo + (hi - lo) * k / n for k in range(n + 1)]
    out = []
    for k in range(n):
        start = math.floor(edges[k] + _EDGE_TOL)
        end = math.ceil(edges[k + 1] - _EDGE_TOL)
        start = min(max(start, 0), limit - 1)
        end = min(max(end, start + 1), limit)
        out.append((start, end))
    return out


def roi_pool(f: FeatureMap, roi: Box, H: int = 7, W: int = 7) -> np.ndarray:
    """Max-pool the projection of ``roi`` into a ``C x H x W`` grid.

    Feature cell ``(i, j)`` spans ``[j, j+1) x [i, i+1)`` in projected
    coordinates.  The projected RoI is clamped to the map, split evenly into
    ``H x W`` real-valued bins and each bin is rounded outward to whole cells,
    so no bin is empty.
    """
    if H < 1 or W < 1:
        raise ValueError("pooled extent must be at least 1 x 1")
    _, hf, wf = f.shape
    s = f.spatial_scale
    x0, y0, x1, y1 = roi.x_min * s, roi.y_min * s, roi.x_max * s, roi.y_max * s
    if x1 <= 0 or y1 <= 0 or x0 >= wf or y0 >= hf:
        raise RoIError(f"RoI {roi} lies entirely outside the {hf}x{wf} feature map")
    x0, x1 = max(x0, 0.0), min(x1, float(wf))
    y0, y1 = max(y0, 0.0), min(y1, float(hf))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise RoIError(f"RoI {roi} collapses to zero extent on the feature map")

    out = np.empty((f.shape[0], H, W))
    rows = _bin_edges(y0, y1, H, hf)
    cols = _bin_edges(x0, x1, W, wf)
    for i, (r0, r1) in enumerate(rows):
        band = f.data[:, r0:r1, :]
        for j, (c0, c1) in enumerate(cols):
            out[:, i, j] = band[:, :, c0:c1].max(axis=(1, 2))
    return out


def visibility_targets(proposal: Box, layout: PartLayout, gt: GTObject,
                       theta: float = 0.5) -> np.ndarray:
    """Binary per-part targets: 1 iff the visible share of the part exceeds theta."""
    if proposal.area <= 0:
        raise DegenerateBoxError(f"proposal has no area: {proposal}")
    return np.array([1 if occlusion_fraction(part, gt.visible) > theta else 0
                     for part in layout.boxes(proposal)], dtype=int)


# ---------------------------------------------------------------------------
# Occlusion process unit


@dataclass(frozen=True)
class OcclusionUnitParams:
    """3x3 conv -> ReLU -> 3x3 conv -> ReLU -> full-extent conv to 2 logits."""

    w1: np.ndarray  # (c1, C, 3, 3)
    b1: np.ndarray
    w2: np.ndarray  # (c2, c1, 3, 3)
    b2: np.ndarray
    w3: np.ndarray  # (2, c2, H, W)
    b3: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            arr = np.ascontiguousarray(getattr(self, f.name), dtype=float)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite occlusion-unit parameter {f.name}")
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)
        if self.w3.shape[0] != 2 or self.b3.shape != (2,):
            raise ValueError("the output layer must produce exactly two logits")
        if self.w2.shape[1] != self.w1.shape[0] or self.w3.shape[1] != self.w2.shape[0]:
            raise ValueError("occlusion-unit layer widths do not chain")

    @classmethod
    def init(cls, channels: int, H: int = 7, W: int = 7,
             widths: Sequence[int] = (128, 32), seed: int = 0) -> "OcclusionUnitParams":
        """Xavier-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        c1, c2 = widths

        def xavier(shape):
            receptive = shape[2] * shape[3]
            limit = math.sqrt(6.0 / ((shape[0] + shape[1]) * receptive))
            return rng.uniform(-limit, limit, size=shape)

        return cls(xavier((c1, channels, 3, 3)), np.zeros(c1),
                   xavier((c2, c1, 3, 3)), np.zeros(c2),
                   xavier((2, c2, H, W)), np.zeros(2))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.w1.shape[1],) + self.w3.shape[2:]

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f.name).ravel() for f in fields(self)])

    def from_flat(self, x: np.ndarray) -> "OcclusionUnitParams":
        out, pos = {}, 0
        for f in fields(self):
            shape = getattr(self, f.name).shape
            size = int(np.prod(shape))
            out[f.name] = np.asarray(x[pos:pos + size]).reshape(shape)
            pos += size
        return OcclusionUnitParams(**out)


def _im2col3(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))      # (C, H, W, 3, 3)
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)


def _col2im3(cols: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    cols = cols.reshape(h, w, c, 3, 3)
    padded = np.zeros((c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            padded[:, di:di + h, dj:dj + w] += cols[:, :, :, di, dj].transpose(2, 0, 1)
    return padded[:, 1:-1, 1:-1]


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cols = _im2col3(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    h, wd = x.shape[1:]
    return out.T.reshape(w.shape[0], h, wd), cols


def _forward(feature: np.ndarray, params: OcclusionUnitParams):
    feature = np.asarray(feature, dtype=float)
    if feature.shape != params.input_shape:
        raise ValueError(f"feature of shape {feature.shape} does not match occlusion unit "
                         f"input {params.input_shape}")
    a1, cols1 = _conv3(feature, params.w1, params.b1)
    h1 = np.maximum(a1, 0.0)
    a2, cols2 = _conv3(h1, params.w2, params.b2)
    h2 = np.maximum(a2, 0.0)
    logits = np.tensordot(params.w3, h2, axes=3) + params.b3
    margin = logits[1] - logits[0]
    raw = 1.0 / (1.0 + math.exp(-margin)) if margin >= 0 else math.exp(margin) / (1.0 + math.exp(margin))
    return raw, (feature, a1, cols1, h1, a2, cols2, h2)


def occlusion_unit_forward(part_feature: np.ndarray, params: OcclusionUnitParams) -> float:
    """Probability of the "visible" class, kept inside ``[EPS, 1 - EPS]``."""
    raw, _ = _forward(part_feature, params)
    return min(max(raw, EPS), 1.0 - EPS)


def occlusion_unit_backward(part_feature: np.ndarray, params: OcclusionUnitParams,
                            d_score: float) -> OcclusionUnitParams:
    """Gradient of a downstream loss w.r.t. every parameter, given d loss / d score."""
    raw, (x, a1, cols1, h1, a2, cols2, h2) = _forward(part_feature, params)
    if not EPS < raw < 1.0 - EPS:
        d_score = 0.0  # clamped output
    d_margin = d_score * raw * (1.0 - raw)
    d_logits = np.array([-d_margin, d_margin])
    gw3 = d_logits[:, None, None, None] * h2[None]
    gb3 = d_logits
    dh2 = np.tensordot(d_logits, params.w3, axes=1)
    da2 = (dh2 * (a2 > 0)).reshape(params.w2.shape[0], -1).T        # (HW, c2)
    gw2 = (da2.T @ cols2).reshape(params.w2.shape)
    gb2 = da2.sum(axis=0)
    dh1 = _col2im3(da2 @ params.w2.reshape(params.w2.shape[0], -1), h1.shape)
    da1 = (dh1 * (a1 > 0)).reshape(params.w1.shape[0], -1).T
    gw1 = (da1.T @ cols1).reshape(params.w1.shape)
    gb1 = da1.sum(axis=0)
    return OcclusionUnitParams(gw1, gb1, gw2, gb2, gw3, gb3)


def combine_features(whole: np.ndarray, parts: Sequence[np.ndarray], scores: Sequence[float]) -> np.ndarray:
    """``whole + o1*F1 + ... + o5*F5``, accumulated left to right."""
    whole = np.asarray(whole, dtype=float)
    if len(parts) != NUM_PARTS or len(scores) != NUM_PARTS:
        raise ValueError("need five part features and five scores")
    out = whole.copy()
    for part, o in zip(parts, scores):
        part = np.asarray(part, dtype=float)
        if part.shape != whole.shape:
            raise ValueError(f"part feature {part.shape} does not match whole feature {whole.shape}")
        out = out + o * part
    return out


@dataclass(frozen=True)
class PoroiResult:
    combined: np.ndarray
    scores: tuple[float, ...]
    whole: np.ndarray
    parts: tuple[np.ndarray, ...]


def poroi_forward(f: FeatureMap, proposal: Box, layout: PartLayout,
                  params: OcclusionUnitParams | None, H: int = 7, W: int = 7,
                  fixed_scores: Sequence[float] | None = None) -> PoroiResult:
    """Pool the proposal and its five parts, score the parts, recombine.

    ``fixed_scores`` bypasses the occlusion unit (e.g. all ones reproduces the
    unit-less ablation); otherwise ``params`` is required.
    """
    whole = roi_pool(f, proposal, H, W)
    parts = tuple(roi_pool(f, part, H, W) for part in layout.boxes(proposal))
    if fixed_scores is not None:
        scores = tuple(float(o) for o in fixed_scores)
    else:
        if params is None:
            raise ValueError("occlusion-unit parameters are required unless scores are fixed")
        scores = tuple(occlusion_unit_forward(p, params) for p in parts)
    return PoroiResult(combine_features(whole, parts, scores), scores, whole, parts)
