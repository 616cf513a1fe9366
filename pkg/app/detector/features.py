"""Hand-built feature blocks and grid pooling over boxes.

Each block turns the image into a (h_b, w_b, channels) map at its own stride.
Pooling averages a block map over a g x g grid of bins laid over the box,
using integral images, so any number of boxes is pooled in one pass.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from app.core.geom import BoundingBox
from app.errors import DegenerateBoxError, PreconditionError

MIN_BOX_AREA = 1e-6


def _as_float(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114])


def _abs_gradients(lum: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, :-1] = np.abs(lum[:, 1:] - lum[:, :-1])
    gy[:-1, :] = np.abs(lum[1:, :] - lum[:-1, :])
    return gx, gy


def color_block(image: np.ndarray) -> np.ndarray:
    return _as_float(image)


def edge_block(image: np.ndarray) -> np.ndarray:
    gx, gy = _abs_gradients(_luminance(_as_float(image)))
    return np.stack([gx, gy], axis=2)


def coarse_block(image: np.ndarray) -> np.ndarray:
    rgb = _as_float(image)
    h, w = (rgb.shape[0] // 2) * 2, (rgb.shape[1] // 2) * 2
    small = rgb[:h, :w].reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))
    gx, gy = _abs_gradients(_luminance(small))
    return np.concatenate([small, np.hypot(gx, gy)[:, :, None]], axis=2)


@dataclass(frozen=True)
class FeatureBlock:
    name: str
    stride: int
    channels: int
    producer: Callable[[np.ndarray], np.ndarray]


BLOCK_REGISTRY: Dict[str, FeatureBlock] = {
    "color": FeatureBlock("color", 1, 3, color_block),
    "edge": FeatureBlock("edge", 1, 2, edge_block),
    "coarse": FeatureBlock("coarse", 2, 4, coarse_block),
}
DEFAULT_BLOCKS = ("color", "edge", "coarse")


def resolve_blocks(names: Sequence[str]) -> Tuple[FeatureBlock, ...]:
    if len(names) < 2:
        raise PreconditionError("a feature pathway needs at least two blocks")
    unknown = [n for n in names if n not in BLOCK_REGISTRY]
    if unknown:
        raise PreconditionError(f"unknown feature blocks: {unknown}")
    return tuple(BLOCK_REGISTRY[n] for n in names)


def _integral(feature_map: np.ndarray) -> np.ndarray:
    h, w, c = feature_map.shape
    integral = np.zeros((h + 1, w + 1, c), dtype=np.float64)
    integral[1:, 1:] = feature_map.cumsum(axis=0).cumsum(axis=1)
    return integral


def _bin_edges(lo: np.ndarray, hi: np.ndarray, grid: int, stride: int, limit: int) -> Tuple[np.ndarray, np.ndarray]:
    """Integer [start, stop) bins per box; empty bins are widened to one cell."""
    fractions = np.arange(grid + 1, dtype=np.float64) / grid
    edges = lo[:, None] + (hi - lo)[:, None] * fractions[None, :]
    edges = np.clip(np.floor(edges / stride + 0.5).astype(np.int64), 0, limit)
    start, stop = edges[:, :-1], edges[:, 1:]
    stop = np.maximum(stop, start + 1)
    overflow = stop > limit
    start = np.where(overflow, limit - 1, start)
    stop = np.where(overflow, limit, stop)
    return start, stop


class ImageFeatures:
    """Block maps and their integral images for one image."""

    def __init__(self, image: np.ndarray, blocks: Sequence[FeatureBlock]):
        self.height, self.width = image.shape[:2]
        self.blocks = tuple(blocks)
        self.maps = [block.producer(image) for block in self.blocks]
        self.integrals = [_integral(m) for m in self.maps]

    def pool(self, boxes: np.ndarray, grid: int, block_indices: Sequence[int] = None) -> List[np.ndarray]:
        """Per block, an (N, grid*grid, channels) array of bin means."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        indices = range(len(self.blocks)) if block_indices is None else block_indices
        pooled = []
        for b in indices:
            block, integral = self.blocks[b], self.integrals[b]
            hb, wb = self.maps[b].shape[:2]
            x0, x1 = _bin_edges(boxes[:, 0], boxes[:, 2], grid, block.stride, wb)
            y0, y1 = _bin_edges(boxes[:, 1], boxes[:, 3], grid, block.stride, hb)
            # (N, gy, gx) corner lookups
            ya, yb = y0[:, :, None], y1[:, :, None]
            xa, xb = x0[:, None, :], x1[:, None, :]
            sums = integral[yb, xb] - integral[ya, xb] - integral[yb, xa] + integral[ya, xa]
            area = ((yb - ya) * (xb - xa)).astype(np.float64)
            means = sums / area[..., None]
            pooled.append(means.reshape(boxes.shape[0], grid * grid, block.channels))
        return pooled


def check_boxes(boxes: np.ndarray, height: int, width: int):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    if np.any(~np.isfinite(boxes)) or np.any(areas < MIN_BOX_AREA) or np.any(boxes[:, 2] <= boxes[:, 0]) \
            or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise DegenerateBoxError("box area below epsilon")
    if np.any(boxes[:, :2] < 0) or np.any(boxes[:, 2] > width) or np.any(boxes[:, 3] > height):
        raise PreconditionError("box lies outside the image")


def shape_features(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(boxes[:, 2] - boxes[:, 0]) / width, (boxes[:, 3] - boxes[:, 1]) / height], axis=1)


def extract_features(blocks: Sequence[FeatureBlock], image: np.ndarray, box: BoundingBox,
                     grid: int = 3) -> np.ndarray:
    """Fixed-length pooled vector: every block's grid bins concatenated."""
    boxes = box.as_array()[None, :]
    check_boxes(boxes, image.shape[0], image.shape[1])
    pooled = ImageFeatures(image, blocks).pool(boxes, grid)
    return np.concatenate([p.reshape(-1) for p in pooled])
