"""Greedy NMS, Caltech-style evaluation matching, FPPI / miss-rate curves,
log-average miss rate and occlusion subsets."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .geometry import Box, GTObject, as_box_array, box_areas, intersection_matrix, iou_matrix

TP, FP, IGNORE = "TP", "FP", "IGNORE"


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


def _score_order(scores: np.ndarray) -> np.ndarray:
    # descending, ties keep ingestion order
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


_DENSE_NMS_LIMIT = 3000


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Indices kept by greedy NMS, in keep order.

    A box is suppressed when its IoU with an already kept box is strictly
    greater than ``iou_thresh``.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"NMS threshold must lie in [0, 1], got {iou_thresh}")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    order = _score_order(scores)
    if len(order) <= _DENSE_NMS_LIMIT:
        overlap = iou_matrix(boxes[order], boxes[order])
        alive = np.ones(len(order), bool)
        for k in range(len(order)):
            if alive[k]:
                alive[k + 1:] &= overlap[k, k + 1:] <= iou_thresh
        return order[alive]
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        overlap = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[overlap <= iou_thresh]
    return np.asarray(keep, dtype=int)


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    boxes = as_box_array([d.box for d in dets])
    keep = nms_indices(boxes, np.array([d.score for d in dets], dtype=float), iou_thresh)
    return [dets[i] for i in keep]


# ---------------------------------------------------------------------------
# Evaluation matching


@dataclass(frozen=True)
class ImageMatch:
    det_status: tuple[str, ...]     # per detection, input order
    gt_matched: tuple[bool, ...]    # per ground truth; ignored gts are never "matched"
    gt_ignore: tuple[bool, ...]

    @property
    def num_tp(self) -> int:
        return self.det_status.count(TP)

    @property
    def num_fp(self) -> int:
        return self.det_status.count(FP)

    @property
    def num_missed(self) -> int:
        return sum(1 for m, ig in zip(self.gt_matched, self.gt_ignore) if not m and not ig)


def match_image(boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray,
                gt_ignore: np.ndarray, iou_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`match_detections`.

    Returns per-detection status codes (1 TP, 0 FP, -1 ignored) and the
    per-gt matched flags.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    gt_ignore = np.asarray(gt_ignore, dtype=bool)
    status = np.zeros(len(boxes), dtype=int)
    matched = np.zeros(len(gt_boxes), dtype=bool)
    if len(boxes) == 0:
        return status, matched
    care = ~gt_ignore
    ious = iou_matrix(boxes, gt_boxes)
    # ignore regions are hit by the share of the detection they cover
    ioa = intersection_matrix(boxes, gt_boxes)
    areas = box_areas(boxes)
    np.divide(ioa, areas[:, None], out=ioa, where=areas[:, None] > 0)
    hits_ignore = (ioa[:, gt_ignore] >= iou_thresh).any(axis=1) if gt_ignore.any() else np.zeros(len(boxes), bool)

    for d in _score_order(scores):
        cand = np.where(care & ~matched, ious[d], -1.0)
        if cand.size and cand.max() >= iou_thresh:
            matched[int(cand.argmax())] = True
            status[d] = 1
        elif hits_ignore[d]:
            status[d] = -1
    return status, matched


def match_detections(dets: Sequence[Detection], gts: Sequence[GTObject],
                     iou_thresh: float = 0.5) -> ImageMatch:
    """Greedy one-to-one matching of one image's detections to its ground truth.

    Detections are visited by descending score; each takes the unmatched,
    non-ignored gt of highest IoU if that IoU reaches ``iou_thresh``.  An
    unmatched detection covering an ignore region by at least ``iou_thresh``
    of its own area is neither TP nor FP.
    """
    gt_boxes = as_box_array([g.full for g in gts])
    gt_ignore = np.array([g.ignore for g in gts], dtype=bool)
    status, matched = match_image(as_box_array([d.box for d in dets]),
                                  np.array([d.score for d in dets], dtype=float),
                                  gt_boxes, gt_ignore, iou_thresh)
    names = {1: TP, 0: FP, -1: IGNORE}
    return ImageMatch(tuple(names[s] for s in status.tolist()),
                      tuple(bool(m) for m in matched), tuple(bool(i) for i in gt_ignore))


# ---------------------------------------------------------------------------
# Curves


@dataclass(frozen=True)
class EvalCurve:
    fppi: np.ndarray
    miss_rate: np.ndarray
    thresholds: np.ndarray      # score threshold of each point; +inf for the origin
    mr2: float

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fppi.tolist(), self.miss_rate.tolist()))


ImageRecord = tuple[Sequence[Detection], Sequence[GTObject]]


def curve_from_arrays(scores: np.ndarray, status: np.ndarray, num_images: int,
                      num_gt: int, **mr2_kw) -> EvalCurve:
    """Build the curve from pooled per-detection scores and TP/FP/ignore codes."""
    if num_gt <= 0:
        raise ValueError("no ground truth in scope; miss rate is undefined")
    if num_images <= 0:
        raise ValueError("at least one image is required")
    keep = status >= 0
    scores, status = np.asarray(scores, float)[keep], np.asarray(status)[keep]
    order = _score_order(scores)
    scores, status = scores[order], status[order]
    tp = np.cumsum(status == 1)
    fp = np.cumsum(status == 0)
    # one point per distinct score: keep the last detection of each tie run
    last = np.ones(len(scores), dtype=bool)
    last[:-1] = scores[1:] != scores[:-1]
    fppi = np.concatenate([[0.0], fp[last] / num_images])
    miss = np.concatenate([[1.0], 1.0 - tp[last] / num_gt])
    thr = np.concatenate([[np.inf], scores[last]])
    return EvalCurve(fppi, miss, thr, mr2_from_points(fppi, miss, **mr2_kw))


def fppi_missrate_curve(images: Mapping[Hashable, ImageRecord], iou_thresh: float = 0.5,
                        **mr2_kw) -> EvalCurve:
    """Miss rate against false positives per image, swept over every score threshold.

    Matching is greedy by score, so a detection's outcome only depends on
    higher-scored detections and one matching pass per image serves every
    threshold.
    """
    all_scores, all_status = [], []
    num_gt = 0
    for dets, gts in images.values():
        m = match_detections(dets, gts, iou_thresh)
        num_gt += sum(1 for g in gts if not g.ignore)
        all_scores.extend(d.score for d in dets)
        all_status.extend({TP: 1, FP: 0, IGNORE: -1}[s] for s in m.det_status)
    return curve_from_arrays(np.array(all_scores, dtype=float), np.array(all_status, dtype=int),
                             len(images), num_gt, **mr2_kw)


def sample_miss_rates(fppi: np.ndarray, miss: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Step-interpolated miss rate at each reference FPPI (1.0 before the curve starts)."""
    idx = np.searchsorted(fppi, refs, side="right") - 1
    return np.where(idx >= 0, miss[np.clip(idx, 0, None)], 1.0)


def mr2_from_points(fppi: np.ndarray, miss: np.ndarray, points: int = 9,
                    fppi_range: tuple[float, float] = (1e-2, 1e0)) -> float:
    if len(fppi) == 0:
        raise ValueError("empty curve")
    refs = np.logspace(math.log10(fppi_range[0]), math.log10(fppi_range[1]), points)
    samples = sample_miss_rates(np.asarray(fppi), np.asarray(miss), refs)
    if np.any(samples <= 0):
        return 0.0
    return float(100.0 * np.exp(np.mean(np.log(samples))))


def mr2(curve: EvalCurve, points: int = 9, fppi_range: tuple[float, float] = (1e-2, 1e0)) -> float:
    """Log-average miss rate in percent over ``points`` log-spaced FPPI values."""
    return mr2_from_points(curve.fppi, curve.miss_rate, points, fppi_range)


def miss_rate_at(curve: EvalCurve, fppi_point: float) -> float:
    return float(sample_miss_rates(curve.fppi, curve.miss_rate, np.array([fppi_point]))[0])


# ---------------------------------------------------------------------------
# Occlusion subsets


@dataclass(frozen=True)
class SubsetSpec:
    name: str
    occ_min: float              # exclusive lower bound
    occ_max: float              # inclusive upper bound
    min_height: float = 50.0

    def contains(self, gt: GTObject) -> bool:
        occ = gt.occlusion
        return self.occ_min < occ <= self.occ_max and gt.height >= self.min_height


SUBSETS: dict[str, SubsetSpec] = {
    "Reasonable": SubsetSpec("Reasonable", -1.0, 0.35),
    "Bare": SubsetSpec("Bare", -1.0, 0.10),
    "Partial": SubsetSpec("Partial", 0.10, 0.35),
    "Heavy": SubsetSpec("Heavy", 0.35, 1.0),
}


def get_subset(name: str) -> SubsetSpec:
    for key, spec in SUBSETS.items():
        if key.lower() == name.lower():
            return spec
    raise KeyError(f"unknown subset {name!r}; choose from {', '.join(SUBSETS)}")


def subset_filter(gts: Sequence[GTObject], spec: SubsetSpec) -> list[GTObject]:
    """Turn every ground truth outside the subset into an ignore region."""
    return [g if g.ignore or spec.contains(g) else GTObject(g.full, g.visible, True) for g in gts]


# ---------------------------------------------------------------------------
# NMS threshold sensitivity


@dataclass(frozen=True)
class SweepResult:
    thresholds: tuple[float, ...]
    miss_rates: tuple[float, ...]    # percent, at the requested FPPI
    mean: float
    variance: float                  # population variance of miss_rates
    fppi_point: float

    def as_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "miss_rates": list(self.miss_rates),
                "mean": self.mean, "variance": self.variance, "fppi": self.fppi_point}


def summarize_series(thresholds: Sequence[float], rates: Sequence[float], fppi_point: float) -> SweepResult:
    arr = np.asarray(rates, dtype=float)
    return SweepResult(tuple(float(t) for t in thresholds), tuple(arr.tolist()),
                       float(arr.mean()), float(arr.var()), fppi_point)


@dataclass(frozen=True)
class ImageArrays:
    """One image's detections and ground truth as plain arrays."""

    boxes: np.ndarray
    scores: np.ndarray
    gt_boxes: np.ndarray
    gt_ignore: np.ndarray

    @classmethod
    def from_records(cls, dets: Sequence[Detection], gts: Sequence[GTObject]) -> "ImageArrays":
        return cls(as_box_array([d.box for d in dets]), np.array([d.score for d in dets], dtype=float),
                   as_box_array([g.full for g in gts]), np.array([g.ignore for g in gts], dtype=bool))


def nms_sweep_arrays(images: Sequence[ImageArrays], thresholds: Sequence[float],
                     fppi_point: float = 1e-2, iou_thresh: float = 0.5) -> SweepResult:
    if len(thresholds) == 0:
        raise ValueError("at least one NMS threshold is required")
    num_gt = int(sum((~im.gt_ignore).sum() for im in images))
    rates = []
    for thr in thresholds:
        scores, status = [], []
        for im in images:
            keep = nms_indices(im.boxes, im.scores, thr)
            st, _ = match_image(im.boxes[keep], im.scores[keep], im.gt_boxes, im.gt_ignore, iou_thresh)
            scores.append(im.scores[keep])
            status.append(st)
        curve = curve_from_arrays(np.concatenate(scores) if scores else np.zeros(0),
                                  np.concatenate(status) if status else np.zeros(0, int),
                                  len(images), num_gt)
        rates.append(100.0 * miss_rate_at(curve, fppi_point))
    return summarize_series(thresholds, rates, fppi_point)


def nms_sweep(images: Mapping[Hashable, ImageRecord], thresholds: Sequence[float],
              fppi_point: float = 1e-2, iou_thresh: float = 0.5) -> SweepResult:
    """Miss rate (percent) at ``fppi_point`` after NMS at each threshold."""
    arrays = [ImageArrays.from_records(dets, gts) for dets, gts in images.values()]
    return nms_sweep_arrays(arrays, thresholds, fppi_point, iou_thresh)
