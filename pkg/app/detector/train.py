from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app.core.geom import iou_matrix
from app.datamodel.types import Dataset, FullAnnotation
from app.detector.anchors import anchor_array
from app.detector.features import ImageFeatures
from app.detector.model import DetectorBatch, DetectorHyper, DetectorModel, detector_loss, init_detector
from app.detector.pathway import PooledBoxes, pool_boxes
from app.errors import DatasetValidationError, EmptyDatasetError
from app.utils.logger import logger
from app.utils.seeding import derive_rng


@dataclass
class AnchorAssignment:
    labels: np.ndarray      # score-head column, C = background, -1 = ignored
    gt_boxes: np.ndarray    # matched gt box per anchor (zeros where not positive)


def assign_anchors(anchors: np.ndarray, truth: FullAnnotation, num_classes: int,
                   positive_iou: float = 0.5, negative_iou: float = 0.3) -> AnchorAssignment:
    """IoU >= positive_iou is foreground, < negative_iou background, the rest ignored.

    Each ground truth's best anchor is also foreground so that small objects always
    have at least one positive.
    """
    n = anchors.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    gt_boxes = np.zeros((n, 4))
    if len(truth) == 0:
        labels[:] = num_classes
        return AnchorAssignment(labels, gt_boxes)
    overlaps = iou_matrix(anchors, truth.boxes())
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    classes = truth.classes()
    labels[best_iou < negative_iou] = num_classes
    positive = best_iou >= positive_iou
    for g in range(overlaps.shape[1]):
        a = int(np.argmax(overlaps[:, g]))
        if overlaps[a, g] > 0:
            positive[a] = True
            best_gt[a] = g
    labels[positive] = classes[best_gt[positive]] - 1
    gt_boxes[positive] = truth.boxes()[best_gt[positive]]
    return AnchorAssignment(labels, gt_boxes)


def sample_anchors(assignment: AnchorAssignment, num_classes: int, count: int, positive_fraction: float,
                   rng: np.random.Generator) -> np.ndarray:
    positives = np.flatnonzero((assignment.labels >= 0) & (assignment.labels < num_classes))
    negatives = np.flatnonzero(assignment.labels == num_classes)
    n_pos = min(len(positives), int(count * positive_fraction))
    n_neg = min(len(negatives), count - n_pos)
    chosen_pos = rng.choice(positives, size=n_pos, replace=False) if n_pos else np.zeros(0, dtype=np.int64)
    chosen_neg = rng.choice(negatives, size=n_neg, replace=False) if n_neg else np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate([chosen_pos, chosen_neg]).astype(np.int64))


def build_batch(model: DetectorModel, images: List[np.ndarray], assignments: List[AnchorAssignment],
                anchors: np.ndarray, hyper: DetectorHyper, rng: np.random.Generator) -> DetectorBatch:
    blocks = model.feature_spec.resolved_blocks()
    pooled: List[PooledBoxes] = []
    labels, boxes, gts = [], [], []
    for image, assignment in zip(images, assignments):
        index = sample_anchors(assignment, model.num_classes, hyper.anchors_per_image,
                               hyper.positive_fraction, rng)
        pooled.append(pool_boxes(ImageFeatures(image, blocks), anchors[index], model.feature_spec.grid))
        labels.append(assignment.labels[index])
        boxes.append(anchors[index])
        gts.append(assignment.gt_boxes[index])
    labels_arr = np.concatenate(labels)
    return DetectorBatch.build(PooledBoxes.concat(pooled), labels_arr, np.concatenate(boxes),
                               np.concatenate(gts), labels_arr < model.num_classes)


def learning_rate(hyper: DetectorHyper, base: float, step: int) -> float:
    return base * hyper.gamma if step >= int(hyper.decay_at * hyper.steps) else base


def sgd_update(params, grads, velocity, lr: float, momentum: float, weight_decay: float):
    for name, value in params.items():
        g = grads[name] + weight_decay * value
        velocity[name] = momentum * velocity.get(name, 0.0) + g
        params[name] = value - lr * velocity[name]


def fit(model_init: Optional[DetectorModel], ds: Dataset, hyper: DetectorHyper, seed: int = 0,
        num_classes: Optional[int] = None) -> DetectorModel:
    """SGD fine-tune (or fresh pre-train when model_init is None) on a fully annotated dataset."""
    if len(ds) == 0:
        raise EmptyDatasetError(f"cannot fit a detector on empty dataset {ds.domain_tag.value}")
    if any(item.full is None for item in ds.items):
        raise DatasetValidationError(f"dataset {ds.domain_tag.value} lacks full annotations")
    model = model_init.copy() if model_init is not None else init_detector(num_classes or ds.num_classes, seed)
    if hyper.steps == 0:
        return model

    base_lr = hyper.lr or model.final_lr or hyper.base_lr
    rng = derive_rng(seed, "detector_fit", model.stage or 0)
    anchors = anchor_array(model.anchor_spec, ds.height, ds.width)
    assignments = [assign_anchors(anchors, item.full, model.num_classes, hyper.positive_iou, hyper.negative_iou)
                   for item in ds.items]
    velocity = {}
    order = rng.permutation(len(ds))
    cursor = 0
    lr = base_lr
    for step in range(hyper.steps):
        picks = []
        for _ in range(min(hyper.images_per_step, len(ds))):
            if cursor == len(order):
                order, cursor = rng.permutation(len(ds)), 0
            picks.append(int(order[cursor]))
            cursor += 1
        batch = build_batch(model, [ds.items[i].image for i in picks], [assignments[i] for i in picks],
                            anchors, hyper, rng)
        loss, grads = detector_loss(model.params, batch, hyper.reg_weight)
        lr = learning_rate(hyper, base_lr, step)
        sgd_update(model.params, grads, velocity, lr, hyper.momentum, hyper.weight_decay)
        if step % hyper.log_every == 0 or step == hyper.steps - 1:
            logger.log_training_step("detector", step, loss, lr)

    model.steps += hyper.steps
    model.final_lr = lr
    model.seed = seed
    return model


def fixed_batch(model: DetectorModel, ds: Dataset, hyper: DetectorHyper, seed: int = 0) -> DetectorBatch:
    """A reproducible batch over the first images, for loss-curve checks."""
    rng = derive_rng(seed, "fixed_batch")
    anchors = anchor_array(model.anchor_spec, ds.height, ds.width)
    items = ds.items[:hyper.images_per_step]
    assignments = [assign_anchors(anchors, item.full, model.num_classes, hyper.positive_iou, hyper.negative_iou)
                   for item in items]
    return build_batch(model, [item.image for item in items], assignments, anchors, hyper, rng)


def train_on_batch(model: DetectorModel, batch: DetectorBatch, hyper: DetectorHyper, steps: int,
                   lr: float) -> Tuple[DetectorModel, List[float]]:
    """Plain gradient descent on one batch; returns the loss before each step."""
    model = model.copy()
    losses = []
    for _ in range(steps):
        loss, grads = detector_loss(model.params, batch, hyper.reg_weight)
        losses.append(loss)
        for name in model.params:
            model.params[name] = model.params[name] - lr * grads[name]
    return model, losses
