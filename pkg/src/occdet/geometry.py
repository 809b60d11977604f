"""Box algebra, anchors, anchor/ground-truth matching and aggregation groups.

Boxes use corner coordinates ``(x_min, y_min, x_max, y_max)`` in pixels.
Array-valued helpers take ``(N, 4)`` float arrays in the same layout so the
hot paths (matching, NMS, the synthetic benchmark) stay vectorised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3

# MatchAssignment label codes; labels >= 0 are ground-truth indices.
NEGATIVE = -1
IGNORED = -2


class DegenerateBoxError(ValueError):
    """A box has zero or negative extent where positive area is required."""


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"inverted box {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def contains(self, other: "Box") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and other.x_max <= self.x_max and other.y_max <= self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=float)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]


def intersection(a: Box, b: Box) -> Box | None:
    x0, y0 = max(a.x_min, b.x_min), max(a.y_min, b.y_min)
    x1, y1 = min(a.x_max, b.x_max), min(a.y_max, b.y_max)
    if x1 <= x0 or y1 <= y0:
        return None
    return Box(x0, y0, x1, y1)


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union; a degenerate (zero-area) union gives 0."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def occlusion_fraction(part: Box, visible: Box) -> float:
    """Fraction of ``part``'s area covered by ``visible``.

    Despite the name this is the *visible* share of the part, which is the
    quantity thresholded to produce visibility targets.
    """
    if part.area <= 0:
        raise DegenerateBoxError(f"part rectangle has no area: {part}")
    return intersection_area(part, visible) / part.area


@dataclass(frozen=True)
class EncodedDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=float)


def encode_box(anchor: Box, gt: Box) -> EncodedDelta:
    """Faster R-CNN parameterisation of ``gt`` relative to ``anchor``."""
    if anchor.width <= 0 or anchor.height <= 0:
        raise DegenerateBoxError(f"anchor has no area: {anchor}")
    if gt.width <= 0 or gt.height <= 0:
        raise DegenerateBoxError(f"cannot encode box with non-positive size: {gt}")
    (ax, ay), (gx, gy) = anchor.center, gt.center
    return EncodedDelta(
        (gx - ax) / anchor.width,
        (gy - ay) / anchor.height,
        math.log(gt.width / anchor.width),
        math.log(gt.height / anchor.height),
    )


def decode_box(anchor: Box, d: EncodedDelta) -> Box:
    if anchor.width <= 0 or anchor.height <= 0:
        raise DegenerateBoxError(f"anchor has no area: {anchor}")
    ax, ay = anchor.center
    cx = ax + d.tx * anchor.width
    cy = ay + d.ty * anchor.height
    w = anchor.width * math.exp(d.tw)
    h = anchor.height * math.exp(d.th)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


# ---------------------------------------------------------------------------
# Vectorised forms over (N, 4) arrays


def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(float, copy=False)
    else:
        arr = np.array([b.as_array() if isinstance(b, Box) else b for b in boxes],
                       dtype=float)
    return arr.reshape(-1, 4)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def intersection_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.clip(w, 0, None) * np.clip(h, 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` / ``(M, 4)`` arrays."""
    inter = intersection_matrix(a, b)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise DegenerateBoxError("anchor with non-positive size")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise DegenerateBoxError("cannot encode box with non-positive size")
    dx = ((gts[:, 0] + 0.5 * gw) - (anchors[:, 0] + 0.5 * aw)) / aw
    dy = ((gts[:, 1] + 0.5 * gh) - (anchors[:, 1] + 0.5 * ah)) / ah
    return np.stack([dx, dy, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = anchors[:, 0] + 0.5 * aw + deltas[:, 0] * aw
    cy = anchors[:, 1] + 0.5 * ah + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


# ---------------------------------------------------------------------------
# Ground truth and anchors


@dataclass(frozen=True)
class GTObject:
    full: Box
    visible: Box
    ignore: bool = False

    def __post_init__(self):
        if self.full.area <= 0:
            raise DegenerateBoxError(f"ground-truth box has no area: {self.full}")
        if not self.full.contains(self.visible):
            raise ValueError(f"visible box {self.visible} not inside full box {self.full}")

    @property
    def height(self) -> float:
        return self.full.height

    @property
    def occlusion(self) -> float:
        """1 - visible area / full area."""
        return 1.0 - self.visible.area / self.full.area


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AnchorSet:
    """Ordered anchors as an ``(N, 4)`` read-only array plus the tiling stride."""

    anchors: np.ndarray
    stride: float

    def __post_init__(self):
        arr = _frozen(np.asarray(self.anchors, dtype=float).reshape(-1, 4))
        if len(arr) and np.any(box_areas(arr) <= 0):
            raise DegenerateBoxError("anchor set contains a zero-area anchor")
        object.__setattr__(self, "anchors", arr)

    def __len__(self) -> int:
        return len(self.anchors)

    def boxes(self) -> list[Box]:
        return [Box(*row) for row in self.anchors.tolist()]


def generate_anchors(image_size: tuple[int, int], stride: float,
                     scales: Sequence[float], aspect_ratio: float = 0.41) -> AnchorSet:
    """Tile one anchor per (cell, scale) over an image.

    ``image_size`` is ``(width, height)``; ``scales`` are anchor heights in
    pixels and ``aspect_ratio`` is width / height.  Order is row-major over
    cells, then by scale.
    """
    if len(scales) == 0:
        raise ValueError("at least one anchor scale is required")
    if stride <= 0 or aspect_ratio <= 0 or min(scales) <= 0:
        raise ValueError("stride, scales and aspect ratio must be positive")
    width, height = image_size
    cols, rows = width / stride, height / stride
    if cols < 1 or rows < 1 or cols != int(cols) or rows != int(rows):
        raise ValueError(f"stride {stride} does not tile image {image_size} into a positive grid")
    cols, rows = int(cols), int(rows)

    cy, cx = np.meshgrid((np.arange(rows) + 0.5) * stride,
                         (np.arange(cols) + 0.5) * stride, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    hs = np.asarray(scales, dtype=float)
    ws = hs * aspect_ratio
    half = np.stack([ws, hs], axis=1) / 2.0
    lo = centers[:, None, :] - half[None, :, :]
    hi = centers[:, None, :] + half[None, :, :]
    anchors = np.concatenate([lo, hi], axis=2).reshape(-1, 4)
    return AnchorSet(anchors, float(stride))


def densify_small_anchors(a: AnchorSet, height_threshold: float = 100.0,
                          factor: int = 2) -> AnchorSet:
    """Replace every anchor shorter than ``height_threshold`` by ``factor**2``
    shifted copies on a sub-grid of pitch ``stride / factor``.

    The copies are centred on the original anchor centre, so for factor 2
    they sit at offsets of +-stride/4 in x and y.  Anchor order is kept,
    with copies of one anchor emitted row-major.
    """
    if factor < 1:
        raise ValueError(f"densification factor must be >= 1, got {factor}")
    if len(a) == 0:
        return AnchorSet(np.zeros((0, 4)), a.stride)
    pitch = a.stride / factor
    offs = (np.arange(factor) + 0.5) * pitch - a.stride / 2.0
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    shifts = np.stack([ox.ravel(), oy.ravel(), ox.ravel(), oy.ravel()], axis=1)

    small = (a.anchors[:, 3] - a.anchors[:, 1]) < height_threshold
    copies = np.where(small, len(shifts), 1)
    out = np.repeat(a.anchors, copies, axis=0)
    # position of each output row among the copies of its source anchor
    within = np.arange(len(out)) - np.repeat(np.cumsum(copies) - copies, copies)
    is_copy = np.repeat(small, copies)
    out[is_copy] += shifts[within[is_copy]]
    return AnchorSet(out, a.stride)


# ---------------------------------------------------------------------------
# Matching and aggregation groups


@dataclass(frozen=True)
class MatchAssignment:
    """Per-anchor labels (gt index, NEGATIVE or IGNORED) and regression targets.

    ``targets`` rows are NaN for every anchor that is not positive.
    """

    labels: np.ndarray
    targets: np.ndarray
    num_gts: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "targets", _frozen(np.asarray(self.targets).reshape(-1, 4)))

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORED


def match_anchors(a: AnchorSet, gts: Sequence[GTObject], pos_thresh: float = POSITIVE_IOU,
                  neg_thresh: float = NEGATIVE_IOU) -> MatchAssignment:
    """Label anchors against ground truth.

    Positives: IoU >= ``pos_thresh`` with a non-ignored gt (assigned to the
    argmax gt), plus each non-ignored gt's best anchor.  Negatives: max IoU
    below ``neg_thresh`` and no ignore region reaching ``pos_thresh``.
    Everything else is ignored.
    """
    if not pos_thresh > neg_thresh:
        raise ValueError("pos_thresh must exceed neg_thresh")
    n = len(a)
    labels = np.full(n, IGNORED, dtype=int)
    targets = np.full((n, 4), np.nan)
    care = [i for i, g in enumerate(gts) if not g.ignore]
    ign = [i for i, g in enumerate(gts) if g.ignore]
    if n == 0:
        return MatchAssignment(labels, targets, len(gts))

    if care:
        gt_boxes = as_box_array([gts[i].full for i in care])
        ious = iou_matrix(a.anchors, gt_boxes)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best_gt]
    else:
        ious = np.zeros((n, 0))
        best_gt = np.zeros(n, dtype=int)
        best_iou = np.zeros(n)
    if ign:
        ign_iou = iou_matrix(a.anchors, as_box_array([gts[i].full for i in ign])).max(axis=1)
    else:
        ign_iou = np.zeros(n)

    labels[(best_iou < neg_thresh) & (ign_iou < pos_thresh)] = NEGATIVE
    pos = best_iou >= pos_thresh
    assigned = best_gt.copy()
    # best-anchor rule; first anchor wins ties so the result is order-stable
    for col in range(len(care)):
        if ious[:, col].max() > 0:
            j = int(ious[:, col].argmax())
            pos[j] = True
            assigned[j] = col
    care_idx = np.asarray(care, dtype=int)
    labels[pos] = care_idx[assigned[pos]]
    if pos.any():
        gt_full = as_box_array([g.full for g in gts])
        targets[pos] = encode_boxes(a.anchors[pos], gt_full[labels[pos]])
    return MatchAssignment(labels, targets, len(gts))


@dataclass(frozen=True)
class AggregationGroup:
    gt_index: int
    target: np.ndarray       # group target in encoded-delta space
    members: tuple[int, ...]


@dataclass(frozen=True)
class AggregationGroups:
    groups: tuple[AggregationGroup, ...] = field(default_factory=tuple)

    @property
    def rho(self) -> int:
        return len(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    @cached_property
    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(member indices, group id per member, targets (rho, 4), sizes)."""
        if not self.groups:
            return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 4)), np.zeros(0, int)
        sizes = np.array([len(g.members) for g in self.groups])
        members = np.concatenate([np.asarray(g.members, dtype=int) for g in self.groups])
        gid = np.repeat(np.arange(len(self.groups)), sizes)
        targets = np.stack([g.target for g in self.groups])
        return members, gid, targets, sizes


def build_aggregation_groups(m: MatchAssignment) -> AggregationGroups:
    """One group per ground truth claimed by two or more positive anchors.

    The group target is the mean of the members' encoded targets.  Each
    member is encoded against a different anchor, so this is the point in
    delta space that the averaged member predictions should reach when
    every member regresses exactly onto the ground truth.
    """
    groups = []
    for gt in range(m.num_gts):
        members = np.flatnonzero(m.labels == gt)
        if len(members) < 2:
            continue
        target = m.targets[members].mean(axis=0)
        groups.append(AggregationGroup(gt, _frozen(target), tuple(int(i) for i in members)))
    return AggregationGroups(tuple(groups))
