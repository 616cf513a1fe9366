from typing import List, Optional

import numpy as np

from app.core.geom import BoundingBox, clip_boxes, decode_offsets, nms_indices, valid_box_mask
from app.datamodel.types import Detection, WeakAnnotation
from app.detector.model import DetectorModel
from app.wsod.heads import mean_refined_scores
from app.wsod.model import WsodModel, image_scores, prepare_image
from app.wsod.train import proposals_for

INFER_NMS = 0.4
MAX_DETECTIONS = 100
MIN_SCORE = 1e-4


def wsod_infer(model: WsodModel, fsod5: Optional[DetectorModel], image: np.ndarray, weak_available: bool = False,
               weak: Optional[WeakAnnotation] = None) -> List[Detection]:
    """Detections from the mean of the refinement heads' foreground scores.

    Proposals come from every detector box unless an image-level label is
    supplied and allowed, in which case the model's training mode is used.
    """
    mode = model.proposal_mode if (weak_available and weak is not None) else "all"
    boxes = proposals_for(model, fsod5, image, weak if mode == "class-filtered" else None, mode)
    prepared = prepare_image(image, boxes, model.feature_spec, with_casd=False)
    scores = image_scores(model, prepared)
    class_scores = mean_refined_scores(scores, model.num_classes)

    height, width = image.shape[:2]
    if model.variant == "casd":
        boxes = clip_boxes(decode_offsets(prepared.boxes, scores.reg[-1].T), width, height)
    keep = valid_box_mask(boxes)

    dets: List[Detection] = []
    for class_id in range(1, model.num_classes + 1):
        row = class_scores[class_id - 1]
        candidates = np.flatnonzero(keep & (row > MIN_SCORE))
        for i in nms_indices(boxes[candidates], row[candidates], INFER_NMS):
            j = candidates[i]
            dets.append(Detection(BoundingBox.from_array(boxes[j]), class_id, float(row[j])))
    dets.sort(key=lambda d: -d.score)
    return dets[:MAX_DETECTIONS]
