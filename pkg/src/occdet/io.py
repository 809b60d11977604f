"""File formats: run configuration, annotations, detections and feature maps.

Parsers reject malformed input with a :class:`FormatError` naming the file,
the line or field, and the rule that was broken.
"""
from __future__ import annotations

import configparser
import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evaluation import Detection
from .geometry import Box, GTObject
from .losses import LossConfig
from .poroi import FeatureMap, PartLayout
from .synth import AnchorConfig, DEFAULT_THRESHOLDS, Fig2bConfig, TrainConfig

FEATURE_MAGIC = b"OCFM"
_FEATURE_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    def __init__(self, path, where: str, message: str):
        self.path, self.where = str(path), where
        super().__init__(f"{path}: {where}: {message}")


# ---------------------------------------------------------------------------
# Run configuration


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    out: list[int] = []
    for tok in text.replace(",", " ").split():
        if "-" in tok[1:]:
            lo, hi = tok.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(tok))
    return tuple(out)


def _parts(text: str) -> tuple[tuple[float, float, float, float], ...]:
    return tuple(tuple(_floats(chunk)) for chunk in text.split(";") if chunk.strip())  # type: ignore[misc]


_DEFAULT_PARTS = "0 0 1 0.2; 0 0.2 0.5 0.6; 0.5 0.2 1 0.6; 0 0.6 0.5 1; 0.5 0.6 1 1"

# key -> (parser, default text)
_DEFAULT_KEYS = {
    "alpha": (float, "1"),
    "beta": (float, "1"),
    "lambda": (float, "1"),
    "theta": (float, "0.5"),
    "pos_iou": (float, "0.5"),
    "neg_iou": (float, "0.3"),
    "anchor_stride": (int, "16"),
    "anchor_scales": (_floats, "48 64 86 116 156"),
    "aspect_ratio": (float, "0.41"),
    "densify_height": (float, "100"),
    "densify_factor": (int, "2"),
    "pool_h": (int, "7"),
    "pool_w": (int, "7"),
    "spatial_scale": (float, "1"),
    "parts": (_parts, _DEFAULT_PARTS),
    "occ_widths": (_ints, "128 32"),
    "nms_thresholds": (_floats, " ".join(str(t) for t in DEFAULT_THRESHOLDS)),
    "match_iou": (float, "0.5"),
    "mr2_points": (int, "9"),
    "mr2_fppi_min": (float, "0.01"),
    "mr2_fppi_max": (float, "1"),
    "fppi_point": (float, "0.01"),
}
_BENCHMARK_KEYS = {
    "seeds": (_ints, "0-9"),
    "train_scenes": (int, "40"),
    "test_scenes": (int, "200"),
    "learning_rate": (float, "0.2"),
    "iterations": (int, "300"),
    "min_passing_seeds": (int, "8"),
}
_SECTIONS = {"defaults": _DEFAULT_KEYS, "benchmark": _BENCHMARK_KEYS}


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    theta: float = 0.5
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    anchor_stride: int = 16
    anchor_scales: tuple[float, ...] = (48.0, 64.0, 86.0, 116.0, 156.0)
    aspect_ratio: float = 0.41
    densify_height: float = 100.0
    densify_factor: int = 2
    pool_h: int = 7
    pool_w: int = 7
    spatial_scale: float = 1.0
    parts: tuple[tuple[float, float, float, float], ...] = _parts(_DEFAULT_PARTS)
    occ_widths: tuple[int, ...] = (128, 32)
    nms_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    match_iou: float = 0.5
    mr2_points: int = 9
    mr2_fppi_min: float = 0.01
    mr2_fppi_max: float = 1.0
    fppi_point: float = 0.01
    seeds: tuple[int, ...] = tuple(range(10))
    train_scenes: int = 40
    test_scenes: int = 200
    learning_rate: float = 0.2
    iterations: int = 300
    min_passing_seeds: int = 8
    source: str = "<defaults>"

    def __post_init__(self):
        checks = [
            (0 <= self.neg_iou <= self.pos_iou <= 1, "need 0 <= neg_iou <= pos_iou <= 1"),
            (self.pool_h >= 1 and self.pool_w >= 1, "pool_h and pool_w must be >= 1"),
            (self.densify_factor >= 1, "densify_factor must be >= 1"),
            (self.anchor_stride >= 1, "anchor_stride must be >= 1"),
            (len(self.anchor_scales) > 0 and min(self.anchor_scales) > 0, "anchor_scales must be positive"),
            (self.aspect_ratio > 0 and self.spatial_scale > 0, "aspect_ratio and spatial_scale must be positive"),
            (len(self.occ_widths) == 2 and min(self.occ_widths) >= 1, "occ_widths needs two positive widths"),
            (len(self.nms_thresholds) > 0 and all(0 <= t <= 1 for t in self.nms_thresholds),
             "nms_thresholds must be non-empty values in [0, 1]"),
            (0 <= self.match_iou <= 1, "match_iou must lie in [0, 1]"),
            (self.mr2_points >= 1, "mr2_points must be >= 1"),
            (0 < self.mr2_fppi_min <= self.mr2_fppi_max, "need 0 < mr2_fppi_min <= mr2_fppi_max"),
            (self.fppi_point > 0, "fppi_point must be positive"),
            (len(self.seeds) > 0, "seeds must not be empty"),
            (self.train_scenes >= 1 and self.test_scenes >= 1, "scene counts must be >= 1"),
            (self.learning_rate > 0 and self.iterations >= 0, "invalid training schedule"),
            (0 <= self.min_passing_seeds <= len(self.seeds), "min_passing_seeds exceeds the seed count"),
        ]
        for ok, msg in checks:
            if not ok:
                raise FormatError(self.source, "config", msg)
        try:
            self.loss_config()
            self.part_layout()
        except ValueError as exc:
            raise FormatError(self.source, "config", str(exc)) from exc

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, beta=self.beta, lam=self.lam, theta=self.theta)

    def part_layout(self) -> PartLayout:
        return PartLayout(self.parts)

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(self.anchor_stride, tuple(self.anchor_scales), self.aspect_ratio,
                            self.densify_height, self.densify_factor, self.pos_iou, self.neg_iou)

    def mr2_kwargs(self) -> dict:
        return {"points": self.mr2_points, "fppi_range": (self.mr2_fppi_min, self.mr2_fppi_max)}

    def fig2b_config(self, seed: int) -> Fig2bConfig:
        return Fig2bConfig(seed=seed, train_scenes=self.train_scenes, test_scenes=self.test_scenes,
                           fppi_point=self.fppi_point, match_iou=self.match_iou,
                           anchors=self.anchor_config(),
                           train=TrainConfig(self.learning_rate, self.iterations),
                           loss=self.loss_config())


def load_config(path: str | Path | None) -> RunConfig:
    """Read an INI file with optional ``[defaults]`` and ``[benchmark]`` sections."""
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise FormatError(path, f"line {getattr(exc, 'lineno', '?')}", str(exc).splitlines()[0]) from exc
    values = {}
    for section in parser.sections():
        keys = _SECTIONS.get(section)
        if keys is None:
            raise FormatError(path, f"[{section}]", f"unknown section; expected one of {sorted(_SECTIONS)}")
        for key, text in parser.items(section):
            if key not in keys:
                raise FormatError(path, f"[{section}] {key}", "unknown key")
            conv = keys[key][0]
            try:
                values["lam" if key == "lambda" else key] = conv(text)
            except ValueError as exc:
                raise FormatError(path, f"[{section}] {key}", f"cannot parse {text!r}: {exc}") from exc
    return RunConfig(**values, source=str(path))


def default_config_text() -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, (_, v) in keys.items())
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Annotations


@dataclass(frozen=True)
class AnnotatedImage:
    id: str
    width: float
    height: float
    objects: tuple[GTObject, ...] = field(default_factory=tuple)


def _xywh(path, where: str, value) -> tuple[float, float, float, float]:
    if not (isinstance(value, list) and len(value) == 4):
        raise FormatError(path, where, "expected [x, y, w, h]")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise FormatError(path, where, "coordinates must be numbers")
    x, y, w, h = (float(v) for v in value)
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        raise FormatError(path, where, "coordinates must be finite")
    if w <= 0 or h <= 0:
        raise FormatError(path, where, "width and height must be positive")
    return x, y, w, h


def _clamped(path, where: str, xywh, width: float, height: float) -> Box:
    x, y, w, h = xywh
    x0, y0 = min(max(x, 0.0), width), min(max(y, 0.0), height)
    x1, y1 = min(max(x + w, 0.0), width), min(max(y + h, 0.0), height)
    if x1 <= x0 or y1 <= y0:
        raise FormatError(path, where, "box lies outside the image")
    return Box(x0, y0, x1, y1)


def _check_keys(path, where: str, obj, required: set, optional: set = frozenset()) -> None:
    if not isinstance(obj, dict):
        raise FormatError(path, where, "expected an object")
    missing = required - obj.keys()
    if missing:
        raise FormatError(path, where, f"missing field(s) {sorted(missing)}")
    extra = obj.keys() - required - optional
    if extra:
        raise FormatError(path, where, f"unknown field(s) {sorted(extra)}")


def parse_annotations(text: str, path: str | Path = "<string>") -> list[AnnotatedImage]:
    """Parse the JSON annotation format.

    Boxes are ``[x, y, w, h]`` and are clamped to the image; the visible box
    must then lie inside the full box.  Image ids must be unique.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"line {exc.lineno} column {exc.colno}", exc.msg) from exc
    _check_keys(path, "document", doc, {"images"})
    if not isinstance(doc["images"], list):
        raise FormatError(path, "images", "expected a list")
    images, seen = [], set()
    for i, im in enumerate(doc["images"]):
        where = f"images[{i}]"
        _check_keys(path, where, im, {"id", "width", "height"}, {"objects"})
        if not isinstance(im["id"], (str, int)) or isinstance(im["id"], bool):
            raise FormatError(path, f"{where}.id", "id must be a string or an integer")
        image_id = str(im["id"])
        if image_id in seen:
            raise FormatError(path, f"{where}.id", f"duplicate image id {image_id!r}")
        seen.add(image_id)
        width, height = im["width"], im["height"]
        for name, v in (("width", width), ("height", height)):
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise FormatError(path, f"{where}.{name}", "must be a positive number")
        objs = im.get("objects", [])
        if not isinstance(objs, list):
            raise FormatError(path, f"{where}.objects", "expected a list")
        gts = []
        for j, ob in enumerate(objs):
            ow = f"{where}.objects[{j}]"
            _check_keys(path, ow, ob, {"bbox", "vis_bbox"}, {"ignore"})
            full = _clamped(path, f"{ow}.bbox", _xywh(path, f"{ow}.bbox", ob["bbox"]), width, height)
            vis = _clamped(path, f"{ow}.vis_bbox", _xywh(path, f"{ow}.vis_bbox", ob["vis_bbox"]), width, height)
            if not full.contains(vis):
                raise FormatError(path, f"{ow}.vis_bbox", "visible box must lie inside bbox")
            ignore = ob.get("ignore", 0)
            if ignore not in (0, 1) or isinstance(ignore, float):
                raise FormatError(path, f"{ow}.ignore", "must be 0 or 1")
            gts.append(GTObject(full, vis, bool(ignore)))
        images.append(AnnotatedImage(image_id, float(width), float(height), tuple(gts)))
    return images


def read_annotations(path: str | Path) -> list[AnnotatedImage]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(path, "file", exc.strerror or str(exc)) from exc
    return parse_annotations(text, path)


def _num(v: float):
    # integers print without a trailing .0 so files stay byte-stable
    return int(v) if float(v).is_integer() else float(v)


def dump_annotations(images: Sequence[AnnotatedImage]) -> str:
    doc = {"images": [
        {"id": im.id, "width": _num(im.width), "height": _num(im.height),
         "objects": [{"bbox": [_num(v) for v in g.full.to_xywh()],
                      "vis_bbox": [_num(v) for v in g.visible.to_xywh()],
                      "ignore": int(g.ignore)} for g in im.objects]}
        for im in images]}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_annotations(path: str | Path, images: Sequence[AnnotatedImage]) -> None:
    Path(path).write_text(dump_annotations(images), encoding="utf-8")


# ---------------------------------------------------------------------------
# Detections


DETECTION_HEADER = ("image_id", "x", "y", "w", "h", "score")


def parse_detections(lines: Iterable[str], path: str | Path = "<string>",
                     known_ids: set[str] | None = None) -> list[Detection]:
    """Rows of ``image_id,x,y,w,h,score``; an optional header row is skipped."""
    dets = []
    for lineno, row in enumerate(csv.reader(lines), start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if lineno == 1 and tuple(c.strip() for c in row) == DETECTION_HEADER:
            continue
        where = f"line {lineno}"
        if len(row) != 6:
            raise FormatError(path, where, f"expected 6 fields, found {len(row)}")
        image_id = row[0].strip()
        if known_ids is not None and image_id not in known_ids:
            raise FormatError(path, where, f"image id {image_id!r} is not in the annotations")
        try:
            x, y, w, h, score = (float(c) for c in row[1:])
        except ValueError as exc:
            raise FormatError(path, where, f"non-numeric field: {exc}") from exc
        if not all(math.isfinite(v) for v in (x, y, w, h, score)):
            raise FormatError(path, where, "values must be finite")
        if w < 0 or h < 0:
            raise FormatError(path, where, "width and height must be non-negative")
        dets.append(Detection(image_id, Box(x, y, x + w, y + h), score))
    return dets


def read_detections(path: str | Path, known_ids: set[str] | None = None) -> list[Detection]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return parse_detections(fh, path, known_ids)
    except OSError as exc:
        raise FormatError(path, "file", exc.strerror or str(exc)) from exc


def write_detections(path: str | Path, dets: Sequence[Detection]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_HEADER)
        for d in dets:
            w.writerow([d.image_id, *(repr(float(v)) for v in d.box.to_xywh()), repr(float(d.score))])


def group_by_image(images: Sequence[AnnotatedImage], dets: Sequence[Detection]) -> dict:
    """``{image_id: (detections, ground truths)}`` in annotation order."""
    out = {im.id: ([], list(im.objects)) for im in images}
    for d in dets:
        out[str(d.image_id)][0].append(d)
    return out


# ---------------------------------------------------------------------------
# Feature maps


def dump_feature_map(f: FeatureMap) -> bytes:
    c, h, w = f.shape
    body = np.ascontiguousarray(f.data, dtype="<f8").tobytes()
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, c, h, w) + body


def parse_feature_map(blob: bytes, path: str | Path = "<bytes>", spatial_scale: float = 1.0) -> FeatureMap:
    if len(blob) < _FEATURE_HEADER.size:
        raise FormatError(path, "header", "file is shorter than the header")
    magic, c, h, w = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(path, "header", f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if min(c, h, w) == 0:
        raise FormatError(path, "header", f"empty feature map shape ({c}, {h}, {w})")
    expected = _FEATURE_HEADER.size + 8 * c * h * w
    if len(blob) != expected:
        raise FormatError(path, "body", f"expected {expected} bytes for shape ({c}, {h}, {w}), found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f8", offset=_FEATURE_HEADER.size).reshape(c, h, w).astype(float)
    if not np.isfinite(data).all():
        raise FormatError(path, "body", "feature values must be finite")
    return FeatureMap(data, spatial_scale)


def read_feature_map(path: str | Path, spatial_scale: float = 1.0) -> FeatureMap:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, "file", exc.strerror or str(exc)) from exc
    return parse_feature_map(blob, path, spatial_scale)


def write_feature_map(path: str | Path, f: FeatureMap) -> None:
    Path(path).write_bytes(dump_feature_map(f))


def with_source(cfg: RunConfig, source: str) -> RunConfig:
    return replace(cfg, source=source)
