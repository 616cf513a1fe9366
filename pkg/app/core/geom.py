"""Axis-aligned box geometry, IoU, NMS and greedy matching.

Coordinates are continuous pixels; area = (x_max - x_min) * (y_max - y_min)
with no +1 correction. Score ties always go to the lower original index.
"""
import math
from dataclasses import dataclass
from typing import List, Protocol, Sequence, Tuple

import numpy as np

from app.errors import InvalidBoxError, PreconditionError, UnsortedDetectionsError


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(float(v)) for v in coords):
            raise InvalidBoxError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"box must satisfy x_min < x_max and y_min < y_max, got {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "BoundingBox":
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)

    def within(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


class Scored(Protocol):
    box: BoundingBox
    class_id: int
    score: float


class Labelled(Protocol):
    box: BoundingBox
    class_id: int


class InstanceSet(Protocol):
    instances: Sequence[Labelled]


@dataclass(frozen=True)
class Matching:
    pairs: Tuple[Tuple[int, int], ...]
    unmatched_dets: Tuple[int, ...]
    unmatched_gts: Tuple[int, ...]


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of valid boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    xx1 = np.maximum(a[:, None, 0], b[None, :, 0])
    yy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    xx2 = np.minimum(a[:, None, 2], b[None, :, 2])
    yy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if not isinstance(a, BoundingBox) or not isinstance(b, BoundingBox):
        raise InvalidBoxError("iou expects two BoundingBox values")
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score, lower index first on ties."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _check_threshold(threshold: float):
    if not (0.0 <= threshold <= 1.0):
        raise PreconditionError(f"IoU threshold must lie in [0, 1], got {threshold}")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Class-agnostic greedy NMS over arrays; returns kept indices by descending score."""
    _check_threshold(iou_threshold)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = score_order(scores)
    keep: List[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return keep


def nms(dets: Sequence[Scored], iou_threshold: float) -> list:
    _check_threshold(iou_threshold)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise PreconditionError("nms requires finite scores")
    if len(dets) == 0:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    classes = np.array([d.class_id for d in dets])
    kept: List[int] = []
    for class_id in np.unique(classes):
        members = np.flatnonzero(classes == class_id)
        local = nms_indices(boxes[members], scores[members], iou_threshold)
        kept.extend(int(members[k]) for k in local)
    kept.sort(key=lambda k: (-scores[k], k))
    return [dets[k] for k in kept]


def check_sorted(scores: Sequence[float]):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size > 1 and np.any(np.diff(scores) > 0):
        raise UnsortedDetectionsError("detections must be sorted by descending score")


def greedy_match(dets: Sequence[Scored], gts: InstanceSet, iou_threshold: float,
                 class_aware: bool = True) -> Matching:
    """Each detection in score order takes the highest-IoU unmatched gt above threshold."""
    _check_threshold(iou_threshold)
    check_sorted([d.score for d in dets])
    gt_list = list(gts.instances)
    overlaps = iou_matrix(boxes_to_array([d.box for d in dets]),
                          boxes_to_array([g.box for g in gt_list]))
    gt_taken = np.zeros(len(gt_list), dtype=bool)
    pairs: List[Tuple[int, int]] = []
    unmatched_dets: List[int] = []
    for di, det in enumerate(dets):
        row = overlaps[di].copy() if len(gt_list) else np.zeros(0)
        eligible = (~gt_taken) & (row > iou_threshold)
        if class_aware and len(gt_list):
            eligible &= np.array([g.class_id == det.class_id for g in gt_list])
        if not np.any(eligible):
            unmatched_dets.append(di)
            continue
        row[~eligible] = -1.0
        gi = int(np.argmax(row))
        gt_taken[gi] = True
        pairs.append((di, gi))
    unmatched_gts = tuple(int(g) for g in np.flatnonzero(~gt_taken))
    return Matching(tuple(pairs), tuple(unmatched_dets), unmatched_gts)


def encode_offsets(proposals: np.ndarray, targets: np.ndarray,
                   weights=(10.0, 10.0, 5.0, 5.0)) -> np.ndarray:
    """Box deltas (dcx/w, dcy/h, log dw, log dh) scaled by weights, row per box."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    wx, wy, ww, wh = weights
    return np.stack([wx * (tx - px) / pw, wy * (ty - py) / ph,
                     ww * np.log(tw / pw), wh * np.log(th / ph)], axis=1)


def decode_offsets(proposals: np.ndarray, deltas: np.ndarray,
                   weights=(10.0, 10.0, 5.0, 5.0), max_log_ratio: float = 4.0) -> np.ndarray:
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    wx, wy, ww, wh = weights
    cx = px + deltas[:, 0] / wx * pw
    cy = py + deltas[:, 1] / wy * ph
    w = pw * np.exp(np.clip(deltas[:, 2] / ww, -max_log_ratio, max_log_ratio))
    h = ph * np.exp(np.clip(deltas[:, 3] / wh, -max_log_ratio, max_log_ratio))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, height)
    return boxes


def valid_box_mask(boxes: np.ndarray, min_size: float = 1e-3) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    finite = np.all(np.isfinite(boxes), axis=1)
    return finite & ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)
