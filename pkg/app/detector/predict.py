from typing import Dict, List, Tuple

import numpy as np

from app.core.geom import BoundingBox, clip_boxes, decode_offsets, nms_indices, valid_box_mask
from app.datamodel.types import Detection
from app.detector.anchors import anchor_array
from app.detector.features import ImageFeatures
from app.detector.model import DetectorModel, head_forward
from app.detector.pathway import pool_boxes

GroupedDetections = Dict[int, List[Detection]]

MAX_PER_CLASS = 100
PADDING_NMS = 0.7


def score_anchors(model: DetectorModel, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Decoded, clipped boxes (N, 4) and class probabilities (N, C+1) for every valid anchor."""
    height, width = image.shape[:2]
    anchors = anchor_array(model.anchor_spec, height, width)
    features = ImageFeatures(image, model.feature_spec.resolved_blocks())
    probs, deltas = head_forward(model.params, pool_boxes(features, anchors, model.feature_spec.grid))
    boxes = clip_boxes(decode_offsets(anchors, deltas), width, height)
    keep = valid_box_mask(boxes)
    return boxes[keep], probs[keep]


def _detections(boxes: np.ndarray, scores: np.ndarray, class_id: int, index) -> List[Detection]:
    return [Detection(BoundingBox.from_array(boxes[i]), class_id, float(scores[i])) for i in index]


def _predict_anchor(model: DetectorModel, boxes, probs, score_threshold: float,
                    nms_threshold: float) -> GroupedDetections:
    grouped: GroupedDetections = {}
    for class_id in range(1, model.num_classes + 1):
        scores = probs[:, class_id - 1]
        candidates = np.flatnonzero(scores > score_threshold)
        kept = nms_indices(boxes[candidates], scores[candidates], nms_threshold)[:MAX_PER_CLASS]
        grouped[class_id] = _detections(boxes, scores, class_id, candidates[kept])
    return grouped


def _predict_query(model: DetectorModel, boxes, probs, nms_threshold: float) -> GroupedDetections:
    """Fixed set of N_q detections, class = argmax foreground class, no score filter."""
    fg = probs[:, :model.num_classes]
    classes = fg.argmax(axis=1) + 1
    scores = fg.max(axis=1)
    kept = nms_indices(boxes, scores, nms_threshold)[:model.num_queries]
    grouped: GroupedDetections = {c: [] for c in range(1, model.num_classes + 1)}
    for i in kept:
        grouped[int(classes[i])].extend(_detections(boxes, scores, int(classes[i]), [i]))
    return grouped


def predict(model: DetectorModel, image: np.ndarray, score_threshold: float = 0.05,
            nms_threshold: float = 0.5) -> GroupedDetections:
    """Class-grouped detections, each class list sorted by descending score."""
    boxes, probs = score_anchors(model, image)
    if model.mode == "query":
        return _predict_query(model, boxes, probs, nms_threshold)
    return _predict_anchor(model, boxes, probs, score_threshold, nms_threshold)


def flatten(grouped: GroupedDetections) -> List[Detection]:
    """All detections across classes by descending score, class order on ties."""
    merged = [d for c in sorted(grouped) for d in grouped[c]]
    return sorted(merged, key=lambda d: -d.score)


def ranked_boxes(model: DetectorModel, image: np.ndarray, limit: int) -> np.ndarray:
    """Top boxes by best foreground score regardless of class, lightly deduplicated."""
    boxes, probs = score_anchors(model, image)
    scores = probs[:, :model.num_classes].max(axis=1)
    kept = nms_indices(boxes, scores, PADDING_NMS)[:limit]
    return boxes[kept]
