"""VOC-style average precision.

Detections of a class are matched per image in score order against that
image's hidden truth, then pooled across images by descending score (stable
in image order) to build the precision/recall curve.
"""
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from app.core.geom import greedy_match
from app.datamodel.types import Detection, FullAnnotation
from app.errors import NoDefinedClassesError, PreconditionError

AP_MODES = ("11-point", "all-point")


def _sorted(dets: Sequence[Detection]) -> List[Detection]:
    return sorted(dets, key=lambda d: -d.score)


def pr_curve(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[FullAnnotation],
             class_id: int, iou_threshold: float = 0.5):
    """(scores, true-positive flags, number of gt instances) for one class."""
    if len(dets_per_image) != len(gts_per_image):
        raise PreconditionError("detections and ground truth cover different image counts")
    scores: List[float] = []
    hits: List[bool] = []
    positives = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        class_gts = gts.of_class(class_id)
        positives += len(class_gts)
        class_dets = _sorted([d for d in dets if d.class_id == class_id])
        matched = {di for di, _ in greedy_match(class_dets, class_gts, iou_threshold).pairs}
        for di, det in enumerate(class_dets):
            scores.append(det.score)
            hits.append(di in matched)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.asarray(scores)[order], np.asarray(hits, dtype=bool)[order], positives


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, mode: str) -> float:
    if mode == "all-point":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        changes = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))
    if mode == "11-point":
        ap = 0.0
        for t in np.arange(11) / 10.0:
            reached = precision[recall >= t]
            ap += float(reached.max()) if reached.size else 0.0
        return ap / 11.0
    raise PreconditionError(f"unknown AP mode {mode}")


def average_precision(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[FullAnnotation],
                      class_id: int, iou_threshold: float = 0.5, mode: str = "11-point") -> Optional[float]:
    """AP of one class, or None when the class has no ground-truth instance."""
    _, hits, positives = pr_curve(dets_per_image, gts_per_image, class_id, iou_threshold)
    if positives == 0:
        return None
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / positives
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return interpolated_ap(recall, precision, mode)


def mean_ap(per_class: Union[Mapping[int, Optional[float]], Sequence[Optional[float]]]) -> float:
    values = per_class.values() if isinstance(per_class, Mapping) else per_class
    defined = [v for v in values if v is not None]
    if not defined:
        raise NoDefinedClassesError("no class has ground-truth instances; mAP is undefined")
    return float(np.mean(defined))


class ApResult(BaseModel):
    per_class: Dict[int, Optional[float]]
    mean_ap: float
    mode: str = Field(pattern="^(11-point|all-point)$")
    iou_threshold: float = 0.5

    def absent_classes(self) -> List[int]:
        return [c for c, ap in self.per_class.items() if ap is None]


def evaluate_detections(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[FullAnnotation],
                        num_classes: int, iou_threshold: float = 0.5, mode: str = "11-point") -> ApResult:
    per_class = {c: average_precision(dets_per_image, gts_per_image, c, iou_threshold, mode)
                 for c in range(1, num_classes + 1)}
    return ApResult(per_class=per_class, mean_ap=mean_ap(per_class), mode=mode, iou_threshold=iou_threshold)
