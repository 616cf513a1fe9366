"""Learned feature pathway shared by the detector and the weak-detection heads.

    pooled block cells --(1x1 embedding + ReLU, per block)--> concat with box shape
    --> x (d_in) --(dense + ReLU)--> h (d)

Weights are stored (out, in). Activations are row-major: one row per box.
"""
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.detector.features import DEFAULT_BLOCKS, FeatureBlock, ImageFeatures, resolve_blocks, shape_features

Params = Dict[str, np.ndarray]


class FeatureSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    blocks: Tuple[str, ...] = DEFAULT_BLOCKS
    grid: int = Field(default=3, ge=1)
    embed_dim: int = Field(default=8, ge=1)
    hidden_dim: int = Field(default=256, ge=1)
    attention_grid: int = Field(default=7, ge=1)

    def resolved_blocks(self) -> Tuple[FeatureBlock, ...]:
        return resolve_blocks(self.blocks)

    @property
    def input_dim(self) -> int:
        return len(self.blocks) * self.grid * self.grid * self.embed_dim + 2


@dataclass
class PooledBoxes:
    """Raw pooled cells per block plus box shape features for N boxes."""
    cells: List[np.ndarray]
    shape: np.ndarray

    @property
    def count(self) -> int:
        return self.shape.shape[0]

    def take(self, index: np.ndarray) -> "PooledBoxes":
        return PooledBoxes([c[index] for c in self.cells], self.shape[index])

    @staticmethod
    def concat(parts: Sequence["PooledBoxes"]) -> "PooledBoxes":
        n_blocks = len(parts[0].cells)
        return PooledBoxes([np.concatenate([p.cells[b] for p in parts]) for b in range(n_blocks)],
                           np.concatenate([p.shape for p in parts]))


def pool_boxes(features: ImageFeatures, boxes: np.ndarray, grid: int) -> PooledBoxes:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return PooledBoxes(features.pool(boxes, grid), shape_features(boxes, features.height, features.width))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ weight.T + bias


def dense_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_weight, grad_bias)."""
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def embed_names(index: int) -> Tuple[str, str]:
    return f"embed_w{index}", f"embed_b{index}"


def init_embedding(params: Params, spec: FeatureSpec, rng: np.random.Generator):
    for b, block in enumerate(spec.resolved_blocks()):
        w_name, b_name = embed_names(b)
        params[w_name] = rng.normal(0.0, np.sqrt(2.0 / block.channels), size=(spec.embed_dim, block.channels))
        params[b_name] = np.zeros(spec.embed_dim)


def embed_forward(params: Params, pooled: PooledBoxes) -> Tuple[np.ndarray, list]:
    """x = [relu(cells_b E_b^T + e_b) for each block, flattened] ++ shape."""
    parts, cache = [], []
    for b, cells in enumerate(pooled.cells):
        w_name, b_name = embed_names(b)
        pre = cells @ params[w_name].T + params[b_name]
        parts.append(relu(pre).reshape(pooled.count, -1))
        cache.append(pre)
    return np.concatenate(parts + [pooled.shape], axis=1), cache


def embed_backward(params: Params, pooled: PooledBoxes, cache: list, grad_x: np.ndarray, grads: Params):
    offset = 0
    for b, (cells, pre) in enumerate(zip(pooled.cells, cache)):
        w_name, b_name = embed_names(b)
        size = pre.shape[1] * pre.shape[2]
        grad_pre = grad_x[:, offset:offset + size].reshape(pre.shape) * (pre > 0)
        offset += size
        grads[w_name] = grads.get(w_name, 0.0) + np.einsum("nke,nkc->ec", grad_pre, cells)
        grads[b_name] = grads.get(b_name, 0.0) + grad_pre.sum(axis=(0, 1))


def embed_cells(params: Params, cells: np.ndarray, block_index: int) -> np.ndarray:
    """Channel embedding of one block's pooled cells, (N, K, e), no shape features."""
    w_name, b_name = embed_names(block_index)
    return relu(cells @ params[w_name].T + params[b_name])
