"""Six-way detection error breakdown (counts only, no AP-impact weighting)."""
from typing import Dict, Sequence

import numpy as np
from pydantic import BaseModel

from app.core.geom import boxes_to_array, check_sorted, iou_matrix
from app.datamodel.types import Detection, FullAnnotation
from app.errors import PreconditionError

ERROR_TYPES = ("classification", "localization", "both", "duplicate", "background", "missed")


class ErrorBreakdown(BaseModel):
    correct: int = 0
    classification: int = 0
    localization: int = 0
    both: int = 0
    duplicate: int = 0
    background: int = 0
    missed: int = 0

    @property
    def detections(self) -> int:
        return (self.correct + self.classification + self.localization + self.both + self.duplicate
                + self.background)

    @property
    def errors(self) -> int:
        return sum(getattr(self, name) for name in ERROR_TYPES)

    def __add__(self, other: "ErrorBreakdown") -> "ErrorBreakdown":
        return ErrorBreakdown(**{name: getattr(self, name) + getattr(other, name)
                                 for name in ErrorBreakdown.model_fields})

    def percentages(self) -> Dict[str, float]:
        """Share of each error type among all errors."""
        total = self.errors
        return {name: (100.0 * getattr(self, name) / total if total else 0.0) for name in ERROR_TYPES}


def tide_decompose(dets: Sequence[Detection], gts: FullAnnotation, fg_iou: float = 0.5,
                   bg_iou: float = 0.1) -> ErrorBreakdown:
    """Classify every detection of one image in score order; unmatched truth counts as missed."""
    if not (0.0 <= bg_iou <= fg_iou <= 1.0):
        raise PreconditionError(f"need 0 <= bg_iou <= fg_iou <= 1, got {bg_iou}, {fg_iou}")
    check_sorted([d.score for d in dets])
    out = ErrorBreakdown()
    gt_classes = gts.classes()
    overlaps = iou_matrix(boxes_to_array([d.box for d in dets]), gts.boxes())
    taken = np.zeros(len(gts), dtype=bool)
    for di, det in enumerate(dets):
        row = overlaps[di]
        same = gt_classes == det.class_id
        same_iou = np.where(same, row, -1.0)
        other_iou = np.where(~same, row, -1.0)
        free = same & ~taken & (row >= fg_iou)
        best_same = same_iou.max() if same_iou.size else -1.0
        best_other = other_iou.max() if other_iou.size else -1.0
        if np.any(free):
            gi = int(np.argmax(np.where(free, row, -1.0)))
            taken[gi] = True
            out.correct += 1
        elif best_other >= fg_iou and best_other >= best_same:
            # class-agnostic best truth belongs to another class
            out.classification += 1
        elif best_same >= fg_iou:
            out.duplicate += 1
        elif best_same >= bg_iou:
            out.localization += 1
        elif best_other >= bg_iou:
            out.both += 1
        else:
            out.background += 1
    out.missed = int(np.count_nonzero(~taken))
    return out


def tide_dataset(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[FullAnnotation],
                 fg_iou: float = 0.5, bg_iou: float = 0.1, score_threshold: float = 0.0) -> ErrorBreakdown:
    if len(dets_per_image) != len(gts_per_image):
        raise PreconditionError("detections and ground truth cover different image counts")
    total = ErrorBreakdown()
    for dets, gts in zip(dets_per_image, gts_per_image):
        kept = sorted((d for d in dets if d.score >= score_threshold), key=lambda d: -d.score)
        total = total + tide_decompose(kept, gts, fg_iou, bg_iou)
    return total
