from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app.datamodel.types import Dataset, DatasetItem, WeakAnnotation, weak_from_full
from app.detector.model import DetectorModel
from app.detector.train import sgd_update
from app.errors import EmptyDatasetError, NoUsableImagesError, PreconditionError, ProposalError
from app.utils.logger import logger
from app.utils.seeding import derive_rng, derive_seed
from app.wsod.model import (
    WsodHyper, WsodImage, WsodModel, compute_targets, init_wsod, prepare_image, wsod_loss,
)
from app.wsod.proposals import generate_proposals, grid_proposals


def resolve_proposal_mode(hyper: WsodHyper, fsod5: Optional[DetectorModel]) -> str:
    """Explicit mode wins; otherwise class-filtered for anchor detectors, all for query detectors."""
    if hyper.proposal_mode is not None:
        return hyper.proposal_mode
    if fsod5 is not None and fsod5.mode == "query":
        return "all"
    return "class-filtered"


def proposals_for(model: WsodModel, fsod5: Optional[DetectorModel], image: np.ndarray,
                  weak: Optional[WeakAnnotation], mode: str) -> np.ndarray:
    if not model.use_detector_proposals or fsod5 is None:
        return grid_proposals(image).boxes
    return generate_proposals(fsod5, image, weak, mode, min_proposals=model.min_proposals,
                              max_proposals=model.max_proposals).boxes


def _weak_of(item: DatasetItem, num_classes: int) -> WeakAnnotation:
    if item.weak is not None:
        return item.weak
    if item.full is not None:
        return weak_from_full(item.full, num_classes)
    raise PreconditionError(f"item {item.name} has no image-level label")


@dataclass
class TrainingImage:
    name: str
    prepared: WsodImage
    weak: WeakAnnotation


def prepare_dataset(model: WsodModel, ds: Dataset, fsod5: Optional[DetectorModel], hyper: WsodHyper,
                    mode: str) -> List[TrainingImage]:
    """Proposals and pooled cells for every usable image; images without proposals are skipped."""
    with_casd = model.variant == "casd"
    prepared = []
    for item in ds.items:
        weak = _weak_of(item, ds.num_classes)
        try:
            boxes = proposals_for(model, fsod5, item.image, weak, mode)
            prepared.append(TrainingImage(item.name, prepare_image(item.image, boxes, model.feature_spec,
                                                                   with_casd, hyper.transforms), weak))
        except ProposalError as e:
            logger.warning(f"Skipping {item.name}: {str(e)}")
    if not prepared:
        raise NoUsableImagesError(f"no image of {ds.domain_tag.value} has proposals to train on")
    return prepared


def train_wsod(variant: str, ds: Dataset, fsod5: Optional[DetectorModel], hyper: Optional[WsodHyper] = None,
               seed: int = 0) -> WsodModel:
    """SGD on L_oicr or L_casd, one image per step in a seeded epoch order."""
    hyper = (hyper or WsodHyper()).model_copy(update={"variant": variant})
    if len(ds) == 0:
        raise EmptyDatasetError(f"cannot train WSOD on empty dataset {ds.domain_tag.value}")
    model = init_wsod(ds.num_classes, hyper, seed=derive_seed(seed, "wsod_init"),
                      feature_spec=fsod5.feature_spec if fsod5 is not None else None,
                      detector=fsod5 if hyper.use_fe else None)
    model.proposal_mode = resolve_proposal_mode(hyper, fsod5)
    images = prepare_dataset(model, ds, fsod5, hyper, model.proposal_mode)
    logger.info(f"Training WSOD ({variant}) on {len(images)}/{len(ds)} images, "
                f"+FE={model.use_fe}, +OP={model.use_detector_proposals}")

    rng = derive_rng(seed, "wsod_fit")
    velocity = {}
    order = rng.permutation(len(images))
    cursor = 0
    for step in range(hyper.steps):
        if cursor == len(order):
            order, cursor = rng.permutation(len(images)), 0
        image = images[int(order[cursor])]
        cursor += 1
        targets = compute_targets(model, image.prepared, image.weak)
        loss, _, grads = wsod_loss(model, image.prepared, image.weak, targets, hyper)
        sgd_update(model.params, grads, velocity, hyper.lr, hyper.momentum, hyper.weight_decay)
        if step % hyper.log_every == 0 or step == hyper.steps - 1:
            logger.log_training_step(f"wsod-{variant}", step, loss, hyper.lr)

    model.steps += hyper.steps
    model.seed = seed
    return model


def train_on_image(model: WsodModel, image: WsodImage, weak: WeakAnnotation, hyper: WsodHyper, steps: int,
                   lr: float) -> Tuple[WsodModel, List[float]]:
    """Plain gradient descent on one prepared image; returns the loss before each step."""
    model = model.copy()
    losses = []
    for _ in range(steps):
        targets = compute_targets(model, image, weak)
        loss, _, grads = wsod_loss(model, image, weak, targets, hyper)
        losses.append(loss)
        for name in model.params:
            model.params[name] = model.params[name] - lr * grads[name]
    return model, losses
