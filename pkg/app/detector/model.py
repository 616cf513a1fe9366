"""The toy fully-supervised detector: anchors scored by a small MLP over pooled features.

Class index layout of the score head: columns 0..C-1 are classes 1..C,
column C is background.
"""
import copy
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.geom import encode_offsets
from app.detector.anchors import AnchorSpec
from app.detector.pathway import (
    FeatureSpec, Params, PooledBoxes, dense, dense_backward, embed_backward, embed_forward, init_embedding, relu,
)

DETECTOR_MODES = ("anchor", "query")


class DetectorHyper(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=300, ge=0)
    lr: Optional[float] = Field(default=None, gt=0)
    base_lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    gamma: float = Field(default=0.8, gt=0, le=1)
    decay_at: float = Field(default=0.8, ge=0, le=1)
    images_per_step: int = Field(default=2, ge=1)
    anchors_per_image: int = Field(default=128, ge=2)
    positive_fraction: float = Field(default=0.5, gt=0, le=1)
    positive_iou: float = Field(default=0.5, ge=0, le=1)
    negative_iou: float = Field(default=0.3, ge=0, le=1)
    reg_weight: float = Field(default=1.0, ge=0)
    log_every: int = Field(default=50, ge=1)


@dataclass
class DetectorModel:
    num_classes: int
    anchor_spec: AnchorSpec
    feature_spec: FeatureSpec
    params: Params
    mode: str = "anchor"
    num_queries: int = 30
    stage: Optional[int] = None
    seed: int = 0
    steps: int = 0
    final_lr: Optional[float] = None
    config_hash: str = ""
    extra: Dict[str, str] = field(default_factory=dict)

    def copy(self) -> "DetectorModel":
        clone = copy.copy(self)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.extra = dict(self.extra)
        return clone

    @property
    def stage_tag(self) -> str:
        return f"FSOD-{self.stage}" if self.stage else "FSOD-0"


def init_detector(num_classes: int, seed: int = 0, anchor_spec: Optional[AnchorSpec] = None,
                  feature_spec: Optional[FeatureSpec] = None, mode: str = "anchor",
                  zero: bool = False, num_queries: int = 30) -> DetectorModel:
    anchor_spec = anchor_spec or AnchorSpec()
    feature_spec = feature_spec or FeatureSpec()
    if mode not in DETECTOR_MODES:
        raise ValueError(f"unknown detector mode {mode}")
    rng = np.random.default_rng(seed)
    params: Params = {}
    init_embedding(params, feature_spec, rng)
    d_in, d = feature_spec.input_dim, feature_spec.hidden_dim
    params["hidden_w"] = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d, d_in))
    params["hidden_b"] = np.zeros(d)
    params["cls_w"] = rng.normal(0.0, 0.01, size=(num_classes + 1, d))
    params["cls_b"] = np.zeros(num_classes + 1)
    params["reg_w"] = np.zeros((4, d))
    params["reg_b"] = np.zeros(4)
    if zero:
        params = {k: np.zeros_like(v) for k, v in params.items()}
    return DetectorModel(num_classes, anchor_spec, feature_spec, params, mode=mode, seed=seed,
                         num_queries=num_queries)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def hidden_forward(params: Params, pooled: PooledBoxes):
    x, embed_cache = embed_forward(params, pooled)
    pre = dense(x, params["hidden_w"], params["hidden_b"])
    return relu(pre), (x, embed_cache, pre)


def head_forward(params: Params, pooled: PooledBoxes) -> Tuple[np.ndarray, np.ndarray]:
    """(class probabilities (N, C+1), box deltas (N, 4))."""
    h, _ = hidden_forward(params, pooled)
    return softmax(dense(h, params["cls_w"], params["cls_b"])), dense(h, params["reg_w"], params["reg_b"])


def smooth_l1(diff: np.ndarray, beta: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise value and derivative."""
    absd = np.abs(diff)
    value = np.where(absd < beta, 0.5 * diff ** 2 / beta, absd - 0.5 * beta)
    grad = np.where(absd < beta, diff / beta, np.sign(diff))
    return value, grad


@dataclass
class DetectorBatch:
    """Sampled anchors of one step: labels index the score head (C = background)."""
    pooled: PooledBoxes
    labels: np.ndarray
    anchors: np.ndarray
    targets: np.ndarray
    positive: np.ndarray

    @classmethod
    def build(cls, pooled: PooledBoxes, labels: np.ndarray, anchors: np.ndarray, gt_boxes: np.ndarray,
              positive: np.ndarray) -> "DetectorBatch":
        targets = np.zeros((len(labels), 4))
        if np.any(positive):
            targets[positive] = encode_offsets(anchors[positive], gt_boxes[positive])
        return cls(pooled, np.asarray(labels, dtype=np.int64), anchors, targets, np.asarray(positive, dtype=bool))


def detector_loss(params: Params, batch: DetectorBatch, reg_weight: float = 1.0) -> Tuple[float, Params]:
    """Mean cross-entropy over sampled anchors + reg_weight * smooth-L1 over positives / max(1, #pos)."""
    n = batch.labels.shape[0]
    h, (x, embed_cache, pre) = hidden_forward(params, batch.pooled)
    probs = softmax(dense(h, params["cls_w"], params["cls_b"]))
    cls_loss = -np.mean(np.log(np.maximum(probs[np.arange(n), batch.labels], 1e-300)))
    grad_logits = probs.copy()
    grad_logits[np.arange(n), batch.labels] -= 1.0
    grad_logits /= n

    deltas = dense(h, params["reg_w"], params["reg_b"])
    npos = max(1, int(batch.positive.sum()))
    value, dvalue = smooth_l1(deltas - batch.targets)
    mask = batch.positive[:, None].astype(np.float64)
    reg_loss = float((value * mask).sum()) / npos
    grad_deltas = reg_weight * dvalue * mask / npos

    grads: Params = {}
    grad_h_cls, grads["cls_w"], grads["cls_b"] = dense_backward(h, params["cls_w"], grad_logits)
    grad_h_reg, grads["reg_w"], grads["reg_b"] = dense_backward(h, params["reg_w"], grad_deltas)
    grad_pre = (grad_h_cls + grad_h_reg) * (pre > 0)
    grad_x, grads["hidden_w"], grads["hidden_b"] = dense_backward(x, params["hidden_w"], grad_pre)
    embed_backward(params, batch.pooled, embed_cache, grad_x, grads)
    return float(cls_loss + reg_weight * reg_loss), grads
