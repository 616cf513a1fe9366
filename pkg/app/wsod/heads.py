"""Two-stream MIL core, refinement-label assignment and the per-head losses.

Score matrices are class-major: rows are classes, columns are proposals.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app.core.geom import encode_offsets, iou_matrix
from app.datamodel.types import WeakAnnotation
from app.detector.model import smooth_l1, softmax
from app.errors import PreconditionError

EPS = 1e-8
SEED_IOU = 0.5


@dataclass
class ScoreMatrices:
    x_cls: np.ndarray                # C x M logits
    x_det: np.ndarray                # C x M logits
    cls_soft: np.ndarray             # softmax over classes
    det_soft: np.ndarray             # softmax over proposals
    x0: np.ndarray                   # C x M instance scores
    p: np.ndarray                    # C image scores
    x_ref: List[np.ndarray]          # P x (C+1) x M probabilities
    ref_logits: List[np.ndarray]
    reg: List[np.ndarray]            # P x 4 x M box deltas


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, axis: int) -> np.ndarray:
    inner = (grad_probs * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def wsddn_scores(x_cls: np.ndarray, x_det: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(cls_soft, det_soft, x0, p) from the two logit streams."""
    cls_soft = softmax(x_cls, axis=0)
    det_soft = softmax(x_det, axis=1)
    x0 = cls_soft * det_soft
    return cls_soft, det_soft, x0, x0.sum(axis=1)


def wsddn_backward(scores: ScoreMatrices, grad_x0: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (x_cls, x_det) given dL/dx0."""
    grad_cls = softmax_backward(scores.cls_soft, grad_x0 * scores.det_soft, axis=0)
    grad_det = softmax_backward(scores.det_soft, grad_x0 * scores.cls_soft, axis=1)
    return grad_cls, grad_det


def mlc_loss(p: np.ndarray, weak: WeakAnnotation) -> Tuple[float, np.ndarray]:
    """Summed binary cross-entropy of image scores; gradient is zero where p is clamped."""
    y = weak.as_array()
    if y.shape != p.shape:
        raise PreconditionError("image scores and weak label differ in length")
    clamped = np.clip(p, EPS, 1.0 - EPS)
    loss = -np.sum(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped))
    grad = -y / clamped + (1.0 - y) / (1.0 - clamped)
    grad = np.where((p > EPS) & (p < 1.0 - EPS), grad, 0.0)
    return float(loss), grad


@dataclass
class Assignment:
    labels: np.ndarray       # 1..C+1, C+1 is background
    weights: np.ndarray
    seed_boxes: np.ndarray   # target box of each foreground proposal
    seeds: List[Tuple[int, int, float]]  # (class, proposal, score)


def oicr_assign(prev_scores: np.ndarray, boxes: np.ndarray, weak: WeakAnnotation,
                seed_iou: float = SEED_IOU) -> Assignment:
    """Top proposal of each present class seeds a cluster; overlapping proposals inherit it."""
    num_classes = weak.num_classes
    scores = np.array(prev_scores[:num_classes], dtype=np.float64, copy=True)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    m = boxes.shape[0]
    seeds: List[Tuple[int, int, float]] = []
    for class_id in weak.present_classes():
        j = int(np.argmax(scores[class_id - 1]))
        seeds.append((class_id, j, float(scores[class_id - 1, j])))
        # a proposal seeds at most one class
        scores[:, j] = 0.0

    labels = np.full(m, num_classes + 1, dtype=np.int64)
    weights = np.full(m, max((s for _, _, s in seeds), default=1.0))
    seed_boxes = np.zeros((m, 4))
    if seeds:
        seed_index = np.array([j for _, j, _ in seeds])
        overlaps = iou_matrix(boxes, boxes[seed_index])
        best = overlaps.argmax(axis=1)
        best_iou = overlaps[np.arange(m), best]
        fg = best_iou >= seed_iou
        for k, (class_id, j, score) in enumerate(seeds):
            members = fg & (best == k)
            labels[members] = class_id
            weights[members] = score
            seed_boxes[members] = boxes[j]
    return Assignment(labels, weights, seed_boxes, seeds)


def refinement_loss(x_ref: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """-(1/M) sum_i w_i log x_ref[label_i, i]; gradient w.r.t. the probabilities."""
    m = x_ref.shape[1]
    cols = np.arange(m)
    picked = x_ref[labels - 1, cols]
    clamped = np.maximum(picked, EPS)
    loss = -np.sum(weights * np.log(clamped)) / m
    grad = np.zeros_like(x_ref)
    grad[labels - 1, cols] = np.where(picked > EPS, -weights / (m * clamped), 0.0)
    return float(loss), grad


def regression_loss(reg_out: np.ndarray, labels: np.ndarray, seed_boxes: np.ndarray, boxes: np.ndarray,
                    num_classes: int) -> Tuple[float, np.ndarray]:
    """Mean smooth-L1 over foreground proposals between predicted and proposal-to-seed offsets."""
    grad = np.zeros_like(reg_out)
    fg = np.flatnonzero(labels <= num_classes)
    if fg.size == 0:
        return 0.0, grad
    targets = encode_offsets(np.asarray(boxes)[fg], seed_boxes[fg]).T
    value, dvalue = smooth_l1(reg_out[:, fg] - targets)
    grad[:, fg] = dvalue / fg.size
    return float(value.sum() / fg.size), grad


def stage_scores(scores: ScoreMatrices, head: int, num_classes: int) -> np.ndarray:
    """Supervision source of refinement head `head` (0-based): x0, then the previous head's foreground rows."""
    return scores.x0 if head == 0 else scores.x_ref[head - 1][:num_classes]


def mean_refined_scores(scores: ScoreMatrices, num_classes: int, heads: Optional[int] = None) -> np.ndarray:
    refs = scores.x_ref if heads is None else scores.x_ref[:heads]
    return np.mean([r[:num_classes] for r in refs], axis=0)
