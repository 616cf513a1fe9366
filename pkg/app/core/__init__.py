from .geom import (
    BoundingBox, Matching, iou, iou_matrix, nms, nms_indices, greedy_match,
    boxes_to_array, encode_offsets, decode_offsets, clip_boxes, valid_box_mask, score_order,
)
