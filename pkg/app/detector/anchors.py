import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.geom import BoundingBox, clip_boxes


class AnchorSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    stride: int = Field(default=8, ge=1)
    scales: Tuple[float, ...] = (16.0, 24.0, 36.0)
    aspects: Tuple[float, ...] = (0.5, 1.0, 2.0)
    min_count: int = Field(default=300, ge=1)


def _grid(spec: AnchorSpec, stride: int, height: int, width: int) -> np.ndarray:
    ny = max(1, height // stride)
    nx = max(1, width // stride)
    cy = (np.arange(ny, dtype=np.float64) + 0.5) * stride
    cx = (np.arange(nx, dtype=np.float64) + 0.5) * stride
    shapes = np.array([(s / math.sqrt(r), s * math.sqrt(r)) for s in spec.scales for r in spec.aspects],
                      dtype=np.float64)
    # order: y, x, scale, aspect
    yy, xx, kk = np.meshgrid(cy, cx, np.arange(len(shapes)), indexing="ij")
    yy, xx, kk = yy.ravel(), xx.ravel(), kk.ravel()
    w, h = shapes[kk, 0], shapes[kk, 1]
    boxes = np.stack([xx - w / 2, yy - h / 2, xx + w / 2, yy + h / 2], axis=1)
    return clip_boxes(boxes, width, height)


def anchor_array(spec: AnchorSpec, height: int, width: int) -> np.ndarray:
    """Dense anchor grid; the stride is halved until the grid reaches min_count."""
    stride = spec.stride
    boxes = _grid(spec, stride, height, width)
    while boxes.shape[0] < spec.min_count and stride > 1:
        stride = max(1, stride // 2)
        boxes = _grid(spec, stride, height, width)
    return boxes


def propose_anchors(image: np.ndarray, spec: Optional[AnchorSpec] = None) -> List[BoundingBox]:
    spec = spec or AnchorSpec()
    height, width = image.shape[:2]
    return [BoundingBox.from_array(row) for row in anchor_array(spec, height, width)]
