from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.geom import iou_matrix
from app.datamodel.types import WeakAnnotation
from app.detector.anchors import AnchorSpec, anchor_array
from app.detector.model import DetectorModel
from app.detector.predict import predict, ranked_boxes
from app.errors import PreconditionError, ProposalError

PROPOSAL_MODES = ("class-filtered", "all")
MIN_PROPOSAL_SIDE = 1.0
GRID_SPEC = AnchorSpec(stride=16, scales=(20.0, 32.0), aspects=(0.5, 1.0, 2.0), min_count=1)


@dataclass(frozen=True)
class ProposalSet:
    boxes: np.ndarray

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


def _usable(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= MIN_PROPOSAL_SIDE) & ((boxes[:, 3] - boxes[:, 1]) >= MIN_PROPOSAL_SIDE)
    return boxes[keep]


def generate_proposals(fsod5: DetectorModel, image: np.ndarray, weak: Optional[WeakAnnotation], mode: str,
                       min_proposals: int = 20, max_proposals: int = 100, score_threshold: float = 0.05,
                       nms_threshold: float = 0.5) -> ProposalSet:
    """Detector boxes as proposals; class-filtered keeps classes the image is labelled with.

    When fewer than min_proposals survive, the detector's best boxes regardless of
    class pad the set.
    """
    if mode not in PROPOSAL_MODES:
        raise PreconditionError(f"unknown proposal mode {mode}")
    if mode == "class-filtered" and weak is None:
        raise PreconditionError("class-filtered proposals need the image-level label")
    grouped = predict(fsod5, image, score_threshold, nms_threshold)
    classes = weak.present_classes() if mode == "class-filtered" else sorted(grouped)
    dets = sorted((d for c in classes for d in grouped.get(c, [])), key=lambda d: -d.score)
    boxes = _usable(np.array([d.box.as_tuple() for d in dets[:max_proposals]]).reshape(-1, 4))

    if boxes.shape[0] < min_proposals:
        pool = _usable(ranked_boxes(fsod5, image, limit=min_proposals + boxes.shape[0]))
        chosen = list(boxes)
        for candidate in pool:
            if len(chosen) >= min_proposals:
                break
            if chosen and iou_matrix(candidate[None, :], np.array(chosen)).max() >= 1.0 - 1e-12:
                continue
            chosen.append(candidate)
        boxes = np.array(chosen, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        raise ProposalError("no proposals survived for this image")
    return ProposalSet(boxes)


def grid_proposals(image: np.ndarray, spec: AnchorSpec = GRID_SPEC) -> ProposalSet:
    """Dense unadapted grid, the proposal source of the baseline configuration."""
    height, width = image.shape[:2]
    return ProposalSet(_usable(anchor_array(spec, height, width)))
