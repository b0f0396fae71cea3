"""Box algebra, anchor grids, regression encoding and non-maximum suppression.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates.  Areas are
``(x2 - x1) * (y2 - y1)`` with no ``+1`` correction.  Bulk routines take and
return ``(N, 4)`` float64 arrays; the scalar helpers work on :class:`Box`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _backend

# exp() argument cap when decoding sizes; ln(1000 / 16) as in common RPN code
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def make(cls, x1, y1, x2, y2) -> "Box":
        """Build a box, swapping coordinates so that x1 <= x2 and y1 <= y2."""
        x1, x2 = sorted((float(x1), float(x2)))
        y1, y2 = sorted((float(y1), float(y2)))
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


class Anchor(NamedTuple):
    center_x: float
    center_y: float
    width: float
    height: float
    grid_index: int

    def box(self) -> Box:
        hw, hh = 0.5 * self.width, 0.5 * self.height
        return Box(self.center_x - hw, self.center_y - hh, self.center_x + hw, self.center_y + hh)


class RegressionTarget(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw < 0.0:
        iw = 0.0
    if ih < 0.0:
        ih = 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union > 0.0:
        return inter / union
    return 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    return _backend.iou_matrix(a, b)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


@dataclass(frozen=True)
class AnchorSet:
    """Dense anchors ordered row-major over (y, x, scale, ratio)."""

    boxes: np.ndarray = field(repr=False)
    feature_h: int
    feature_w: int
    stride: float
    scales: tuple
    ratios: tuple

    @property
    def num_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, k: int) -> Anchor:
        x1, y1, x2, y2 = self.boxes[k]
        return Anchor(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1, int(k))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.boxes[:, :2] + self.boxes[:, 2:])

    @property
    def sizes(self) -> np.ndarray:
        return self.boxes[:, 2:] - self.boxes[:, :2]


def generate_anchors(feature_h, feature_w, stride, scales, ratios) -> AnchorSet:
    """Place ``len(scales) * len(ratios)`` anchors at the centre of every cell.

    For scale ``s`` and ratio ``r`` (height / width) the anchor is
    ``s / sqrt(r)`` wide and ``s * sqrt(r)`` tall, so its area is ``s**2``.
    """
    if feature_h <= 0 or feature_w <= 0:
        raise ValueError("feature map dimensions must be positive")
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    scales = tuple(float(s) for s in scales)
    ratios = tuple(float(r) for r in ratios)
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    if min(scales) <= 0 or min(ratios) <= 0:
        raise ValueError("scales and ratios must be positive")

    s = np.array(scales)[:, None]
    r = np.array(ratios)[None, :]
    ws = (s / np.sqrt(r)).reshape(-1)
    hs = (s * np.sqrt(r)).reshape(-1)

    cy = (np.arange(feature_h) + 0.5) * stride
    cx = (np.arange(feature_w) + 0.5) * stride
    cy, cx = np.meshgrid(cy, cx, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    boxes = np.stack(
        [cx - 0.5 * ws, cy - 0.5 * hs, cx + 0.5 * ws, cy + 0.5 * hs], axis=-1
    ).reshape(-1, 4)
    boxes.setflags(write=False)
    return AnchorSet(boxes, int(feature_h), int(feature_w), float(stride), scales, ratios)


def encode(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorised centre/log-size offsets of ``gts`` relative to ``anchors``."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("cannot encode a ground-truth box with zero width or height")
    gx = gts[:, 0] + 0.5 * gw
    gy = gts[:, 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode`.  Size offsets are capped to avoid overflow."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_regression(anchor: Anchor, gt: Sequence[float]) -> RegressionTarget:
    t = encode(np.array(anchor.box()), np.array(gt, dtype=np.float64))[0]
    return RegressionTarget(*(float(v) for v in t))


def decode_regression(anchor: Anchor, t: Sequence[float]) -> Box:
    x1, y1, x2, y2 = decode(np.array(anchor.box()), np.array(t, dtype=np.float64))[0]
    return Box(float(x1), float(y1), float(x2), float(y2))


def clip_boxes(boxes: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(boxes)
    out[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, image_w)
    out[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, image_h)
    return out


def clip_box(box: Sequence[float], image_w: float, image_h: float) -> Box:
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    return Box(*(float(v) for v in clip_boxes(np.array(box, dtype=np.float64), image_w, image_h)[0]))


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, max_out: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns indices into ``boxes`` of the kept proposals in descending score
    order.  A box is dropped when its IoU with an already kept box exceeds
    ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if max_out is None:
        max_out = len(boxes)
    if len(boxes) == 0 or max_out <= 0:
        return np.zeros(0, dtype=np.int64)
    order = score_order(scores)
    kept = _backend.nms_sorted(boxes[order], iou_threshold, max_out)
    return order[kept]


@dataclass(frozen=True)
class ProposalSet:
    """Scored boxes sorted by descending score."""

    boxes: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)

    def top(self, k: int) -> "ProposalSet":
        return ProposalSet(self.boxes[:k], self.scores[:k])


def nms_proposals(proposals: ProposalSet, iou_threshold: float, max_out: int | None = None) -> ProposalSet:
    keep = nms(proposals.boxes, proposals.scores, iou_threshold, max_out)
    return ProposalSet(proposals.boxes[keep], proposals.scores[keep])
