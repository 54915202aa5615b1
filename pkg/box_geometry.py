#!/usr/bin/env python3
"""
Box Geometry
============

Coordinate machinery of the region-proposal pipeline: anchors, IOU, box
delta encoding, anchor label assignment and non-maximum suppression.

Scalar functions work on the dataclasses below; the ``*_array`` variants
work on (N, 4) corner arrays ``[x_min, y_min, x_max, y_max]`` and are what
the detector and trainer use in their inner loops.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from enum import IntEnum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dataset_manager import BoundingBox

logger = logging.getLogger(__name__)

# Deltas above this magnitude saturate before exp().
MAX_LOG_SCALE = 10.0

DEFAULT_SCALES = (32.0, 64.0, 128.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class GeometryConfig:
    """Anchor grid, labelling thresholds and proposal NMS settings."""

    anchor_scales: Tuple[float, ...] = DEFAULT_SCALES
    anchor_ratios: Tuple[float, ...] = DEFAULT_RATIOS
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    proposal_nms: float = 0.7
    top_n: int = 300
    pre_nms_top_n: Optional[int] = 1000

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out['anchor_scales'] = list(self.anchor_scales)
        out['anchor_ratios'] = list(self.anchor_ratios)
        return out

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'GeometryConfig':
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in raw.items() if k in known}
        for key in ('anchor_scales', 'anchor_ratios'):
            if key in values:
                values[key] = tuple(float(v) for v in values[key])
        return cls(**values)


@dataclass(frozen=True)
class Anchor:
    center_x: float
    center_y: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"anchor size must be positive, got {self.width}x{self.height}")

    def to_box(self) -> BoundingBox:
        return BoundingBox(
            self.center_x - 0.5 * self.width,
            self.center_y - 0.5 * self.height,
            self.center_x + 0.5 * self.width,
            self.center_y + 0.5 * self.height,
        )


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


@dataclass(frozen=True)
class ScoredBox:
    """A scored region; ``class_id`` None marks a class-agnostic proposal."""

    box: BoundingBox
    score: float
    class_id: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


class LabelKind(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    IGNORE = -1


@dataclass(frozen=True)
class AnchorLabel:
    kind: LabelKind
    gt_index: Optional[int] = None


# ---------------------------------------------------------------------------
# IOU
# ---------------------------------------------------------------------------

def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU of (N, 4) and (M, 4) corner arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """|a ∩ b| / |a ∪ b|."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


# ---------------------------------------------------------------------------
# Anchors
# ---------------------------------------------------------------------------

def _base_shapes(scales: Sequence[float], ratios: Sequence[float]) -> List[Tuple[float, float]]:
    """(width, height) per anchor slot; width/height equals the ratio, area scale^2."""
    return [(s * math.sqrt(r), s / math.sqrt(r)) for r in ratios for s in scales]


def generate_anchors(feat_w: int, feat_h: int, stride: float,
                     scales: Sequence[float] = DEFAULT_SCALES,
                     ratios: Sequence[float] = DEFAULT_RATIOS) -> List[Anchor]:
    """Anchors for every feature cell, row-major over cells, ratio-major within a cell."""
    if len(scales) != 3 or len(ratios) != 3:
        raise ValueError("expected 3 scales and 3 ratios")
    shapes = _base_shapes(scales, ratios)
    anchors = []
    for y in range(feat_h):
        for x in range(feat_w):
            cx, cy = (x + 0.5) * stride, (y + 0.5) * stride
            anchors.extend(Anchor(cx, cy, w, h) for w, h in shapes)
    return anchors


def anchor_array(feat_w: int, feat_h: int, stride: float,
                 scales: Sequence[float] = DEFAULT_SCALES,
                 ratios: Sequence[float] = DEFAULT_RATIOS) -> np.ndarray:
    """Same anchors as generate_anchors, as an (feat_h*feat_w*9, 4) corner array."""
    shapes = np.array(_base_shapes(scales, ratios), dtype=np.float64)
    half = np.concatenate([-shapes / 2, shapes / 2], axis=1)  # (K, 4)
    ys, xs = np.meshgrid(np.arange(feat_h), np.arange(feat_w), indexing='ij')
    cx = (xs.ravel() + 0.5) * stride
    cy = (ys.ravel() + 0.5) * stride
    centers = np.stack([cx, cy, cx, cy], axis=1)  # (P, 4)
    return (centers[:, None, :] + half[None, :, :]).reshape(-1, 4)


# ---------------------------------------------------------------------------
# Delta encoding
# ---------------------------------------------------------------------------

def encode_deltas_array(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """tx=(x-xa)/wa, ty=(y-ya)/ha, tw=ln(w/wa), th=ln(h/ha) over centres and sizes."""
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    w = gts[:, 2] - gts[:, 0]
    h = gts[:, 3] - gts[:, 1]
    x = gts[:, 0] + 0.5 * w
    y = gts[:, 1] + 0.5 * h
    return np.stack([(x - xa) / wa, (y - ya) / ha, np.log(w / wa), np.log(h / ha)], axis=1)


def decode_deltas_array(deltas: np.ndarray, anchors: np.ndarray,
                        width: Optional[float] = None, height: Optional[float] = None) -> np.ndarray:
    """Inverse of encode_deltas_array, clipped to [0, width] x [0, height] when given."""
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    tw = np.clip(deltas[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    th = np.clip(deltas[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    x = deltas[:, 0] * wa + xa
    y = deltas[:, 1] * ha + ya
    w = wa * np.exp(tw)
    h = ha * np.exp(th)
    boxes = np.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], axis=1)
    if width is not None:
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
    if height is not None:
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return boxes


def encode_delta(gt: BoundingBox, anchor: Anchor) -> BoxDelta:
    anchors = np.array([anchor.to_box().as_tuple()])
    return BoxDelta(*encode_deltas_array(np.array([gt.as_tuple()], dtype=np.float64), anchors)[0])


def decode_delta(delta: BoxDelta, anchor: Anchor,
                 bounds: Optional[Tuple[float, float]] = None) -> BoundingBox:
    """Decode one delta; ``bounds`` is (image width, image height)."""
    width, height = bounds if bounds is not None else (None, None)
    anchors = np.array([anchor.to_box().as_tuple()])
    box = decode_deltas_array(np.array([delta.as_tuple()], dtype=np.float64), anchors, width, height)[0]
    return BoundingBox(*(float(v) for v in box))


# ---------------------------------------------------------------------------
# Anchor labelling
# ---------------------------------------------------------------------------

def assign_label_codes(anchors: np.ndarray, gts: np.ndarray, hi: float = 0.7,
                       lo: float = 0.3) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized labelling.

    Returns (codes, matched): codes hold LabelKind values, matched the gt
    index of each anchor's best overlap (-1 when there are no gts).
    """
    if not hi > lo:
        raise ValueError(f"hi ({hi}) must exceed lo ({lo})")
    n = anchors.shape[0]
    codes = np.full(n, int(LabelKind.IGNORE), dtype=np.int64)
    if gts.shape[0] == 0:
        codes[:] = int(LabelKind.NEGATIVE)
        return codes, np.full(n, -1, dtype=np.int64)

    overlaps = iou_matrix(anchors, gts)  # (N, M)
    matched = overlaps.argmax(axis=1)
    max_overlap = overlaps[np.arange(n), matched]

    codes[max_overlap <= lo] = int(LabelKind.NEGATIVE)
    codes[max_overlap >= hi] = int(LabelKind.POSITIVE)

    # Every gt gets its best anchor(s), even below hi.
    gt_best = overlaps.max(axis=0)
    for j in range(gts.shape[0]):
        if gt_best[j] > 0:
            winners = np.flatnonzero(overlaps[:, j] == gt_best[j])
        else:
            winners = np.array([int(overlaps[:, j].argmax())])
        codes[winners] = int(LabelKind.POSITIVE)
        # a winner below hi regresses toward the gt that picked it
        for w in winners:
            if overlaps[w, matched[w]] < hi:
                matched[w] = j
    return codes, matched


def assign_anchor_labels(anchors: Sequence[Anchor], gts: Sequence[BoundingBox],
                         hi: float = 0.7, lo: float = 0.3) -> List[AnchorLabel]:
    """Positive at max-IOU >= hi or as some gt's best anchor; Negative at <= lo; else Ignore."""
    anchor_boxes = boxes_to_array([a.to_box() for a in anchors])
    codes, matched = assign_label_codes(anchor_boxes, boxes_to_array(list(gts)), hi, lo)
    labels = []
    for code, gt_index in zip(codes, matched):
        kind = LabelKind(int(code))
        labels.append(AnchorLabel(kind, int(gt_index) if kind is LabelKind.POSITIVE else None))
    return labels


# ---------------------------------------------------------------------------
# Non-maximum suppression
# ---------------------------------------------------------------------------

def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float,
                top_n: Optional[int] = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    Ties are broken by lexicographic (x_min, y_min, x_max, y_max).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"NMS threshold must lie in (0, 1), got {threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)

    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    order = np.lexsort((y2, x2, y1, x1, -scores))

    keep = []
    limit = top_n if top_n is not None else boxes.shape[0]
    while order.size > 0 and len(keep) < limit:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        xx1 = np.maximum(x1[i], x1[rest])
        yy1 = np.maximum(y1[i], y1[rest])
        xx2 = np.minimum(x2[i], x2[rest])
        yy2 = np.minimum(y2[i], y2[rest])
        inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
        union = areas[i] + areas[rest] - inter
        overlap = np.zeros_like(inter)
        np.divide(inter, union, out=overlap, where=union > 0)
        order = rest[overlap <= threshold]
    return np.array(keep, dtype=np.int64)


def nms(candidates: Sequence[ScoredBox], threshold: float, top_n: Optional[int] = None) -> List[ScoredBox]:
    """Greedy non-maximum suppression over ScoredBox candidates."""
    if not candidates:
        return []
    keep = nms_indices(boxes_to_array([c.box for c in candidates]),
                       np.array([c.score for c in candidates]), threshold, top_n)
    return [candidates[i] for i in keep]
