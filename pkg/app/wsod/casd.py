"""Attention self-distillation between transformed inputs and between feature blocks.

A member map is sigmoid(channel mean of the shared embedding) over an a x a
grid pooled inside a proposal. The aggregate of a member set is their
elementwise max and acts as a fixed target: gradients reach members only.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field

from app.detector.features import ImageFeatures, MIN_BOX_AREA
from app.detector.pathway import FeatureSpec, Params, embed_names


class CasdTransform(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scale: float = Field(default=1.0, gt=0.0)
    hflip: bool = False


DEFAULT_TRANSFORMS: Tuple[CasdTransform, ...] = (
    CasdTransform(scale=1.0, hflip=False),
    CasdTransform(scale=1.0, hflip=True),
    CasdTransform(scale=0.5, hflip=False),
    CasdTransform(scale=0.5, hflip=True),
)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def attention_map(pooled: np.ndarray) -> np.ndarray:
    """sigmoid of the channel mean per cell; pooled is (..., cells, channels)."""
    return sigmoid(np.mean(pooled, axis=-1))


@dataclass
class MemberCells:
    """Raw pooled cells of one member for all proposals, with the proposals it covers."""
    block: int
    cells: np.ndarray        # (M, a*a, channels)
    valid: np.ndarray        # (M,)
    order: np.ndarray        # cell permutation back onto the proposal frame


def _flip_order(grid: int) -> np.ndarray:
    return np.arange(grid * grid).reshape(grid, grid)[:, ::-1].ravel()


def transform_image(image: np.ndarray, boxes: np.ndarray, transform: CasdTransform) -> Tuple[np.ndarray, np.ndarray]:
    height, width = image.shape[:2]
    out = image
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    if transform.scale != 1.0:
        new_w = max(1, int(round(width * transform.scale)))
        new_h = max(1, int(round(height * transform.scale)))
        out = np.asarray(Image.fromarray(np.ascontiguousarray(out)).resize((new_w, new_h), Image.BILINEAR))
        boxes[:, [0, 2]] *= new_w / width
        boxes[:, [1, 3]] *= new_h / height
        width, height = new_w, new_h
    if transform.hflip:
        out = out[:, ::-1]
        boxes[:, [0, 2]] = width - boxes[:, [2, 0]]
    return np.ascontiguousarray(out), boxes


def _valid(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    inside = (boxes[:, 0] >= 0) & (boxes[:, 1] >= 0) & (boxes[:, 2] <= width + 1e-9) & (boxes[:, 3] <= height + 1e-9)
    return inside & (areas >= MIN_BOX_AREA)


def input_wise_cells(image: np.ndarray, boxes: np.ndarray, spec: FeatureSpec,
                     transforms: Sequence[CasdTransform]) -> List[MemberCells]:
    """Last feature block pooled inside each proposal under every transform."""
    blocks = spec.resolved_blocks()
    last = len(blocks) - 1
    members = []
    for transform in transforms:
        t_image, t_boxes = transform_image(image, boxes, transform)
        valid = _valid(t_boxes, t_image.shape[0], t_image.shape[1])
        cells = np.zeros((t_boxes.shape[0], spec.attention_grid ** 2, blocks[last].channels))
        if np.any(valid):
            features = ImageFeatures(t_image, blocks[last:])
            cells[valid] = features.pool(t_boxes[valid], spec.attention_grid)[0]
        order = _flip_order(spec.attention_grid) if transform.hflip else np.arange(spec.attention_grid ** 2)
        members.append(MemberCells(last, cells, valid, order))
    return members


def layer_wise_cells(image: np.ndarray, boxes: np.ndarray, spec: FeatureSpec) -> List[MemberCells]:
    """Every feature block pooled inside each proposal on the untransformed image."""
    features = ImageFeatures(image, spec.resolved_blocks())
    pooled = features.pool(boxes, spec.attention_grid)
    identity = np.arange(spec.attention_grid ** 2)
    valid = _valid(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), image.shape[0], image.shape[1])
    return [MemberCells(b, cells, valid, identity) for b, cells in enumerate(pooled)]


def member_maps(params: Params, members: Sequence[MemberCells]) -> Tuple[np.ndarray, np.ndarray, list]:
    """(maps (m, M, K) on the proposal frame, mask (m, M), cache for the backward pass)."""
    maps, masks, cache = [], [], []
    for member in members:
        w_name, b_name = embed_names(member.block)
        pre = member.cells @ params[w_name].T + params[b_name]
        act = np.maximum(pre, 0.0)
        att = sigmoid(act.mean(axis=-1))
        maps.append(att[:, member.order])
        masks.append(member.valid)
        cache.append((pre, att))
    return np.stack(maps), np.stack(masks), cache


def consistency_loss(members: np.ndarray, mask: Optional[np.ndarray] = None,
                     aggregate: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """sum over proposals and members of mean_cells (aggregate - member)^2.

    members: (m, N, K). The aggregate defaults to the elementwise max over valid
    members and is treated as a constant. Returns (loss, d loss / d members, aggregate).
    """
    members = np.asarray(members, dtype=np.float64)
    if mask is None:
        mask = np.ones(members.shape[:2], dtype=bool)
    if aggregate is None:
        masked = np.where(mask[:, :, None], members, -np.inf)
        aggregate = masked.max(axis=0)
        aggregate = np.where(np.isfinite(aggregate), aggregate, 0.0)
    diff = (aggregate[None] - members) * mask[:, :, None]
    k = members.shape[2]
    loss = float(np.sum(diff ** 2) / k)
    grad = -2.0 * diff / k
    return loss, grad, aggregate


def _members_backward(params: Params, members: Sequence[MemberCells], cache: list, grad_maps: np.ndarray,
                      grads: Params):
    for member, (pre, att), grad_map in zip(members, cache, grad_maps):
        grad_att = np.zeros_like(att)
        grad_att[:, member.order] = grad_map
        grad_mean = grad_att * att * (1.0 - att)
        e = pre.shape[-1]
        grad_pre = (grad_mean[:, :, None] / e) * (pre > 0)
        w_name, b_name = embed_names(member.block)
        grads[w_name] = grads.get(w_name, 0.0) + np.einsum("nke,nkc->ec", grad_pre, member.cells)
        grads[b_name] = grads.get(b_name, 0.0) + grad_pre.sum(axis=(0, 1))


def casd_member_loss(params: Params, members: Sequence[MemberCells], aggregate: Optional[np.ndarray] = None,
                     weight: float = 1.0, grads: Optional[Params] = None) -> Tuple[float, Params, np.ndarray]:
    """Consistency loss of one member set and its embedding gradients, scaled by weight."""
    grads = {} if grads is None else grads
    maps, mask, cache = member_maps(params, members)
    loss, grad_maps, aggregate = consistency_loss(maps, mask, aggregate)
    if weight != 0.0:
        _members_backward(params, members, cache, weight * grad_maps, grads)
    return weight * loss, grads, aggregate


def casd_iw_loss(image: np.ndarray, boxes: np.ndarray, params: Params, spec: FeatureSpec,
                 transforms: Sequence[CasdTransform] = DEFAULT_TRANSFORMS,
                 aggregate: Optional[np.ndarray] = None) -> Tuple[float, Params, np.ndarray]:
    return casd_member_loss(params, input_wise_cells(image, boxes, spec, transforms), aggregate)


def casd_lw_loss(image: np.ndarray, boxes: np.ndarray, params: Params, spec: FeatureSpec,
                 aggregate: Optional[np.ndarray] = None) -> Tuple[float, Params, np.ndarray]:
    return casd_member_loss(params, layer_wise_cells(image, boxes, spec), aggregate)
