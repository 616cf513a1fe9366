from typing import List, Tuple

import numpy as np

from app.datamodel.types import Dataset, DatasetItem, DomainTag, FullAnnotation, Instance, WeakAnnotation
from app.adapt.copy_paste import PasteParams, augment_pseudo_labeled
from app.detector.model import DetectorModel
from app.detector.predict import GroupedDetections, predict
from app.utils.logger import logger
from app.utils.seeding import derive_rng

HARVEST_SCORE_THRESHOLD = 0.05


def pseudo_label(grouped: GroupedDetections, weak: WeakAnnotation, confidence_floor: float = 0.5) -> FullAnnotation:
    """Top-1 detection per present class, if it clears the confidence floor."""
    instances = []
    for class_id in weak.present_classes():
        dets = grouped.get(class_id) or []
        if not dets:
            continue
        best = int(np.argmax([d.score for d in dets]))
        if dets[best].score >= confidence_floor:
            instances.append(Instance(dets[best].box, class_id))
    return FullAnnotation(tuple(instances))


def pseudo_label_dataset(model: DetectorModel, target: Dataset, confidence_floor: float,
                         nms_threshold: float = 0.5) -> Tuple[List[Tuple[int, FullAnnotation]], int]:
    """(item index, pseudo-labels) for every target image with at least one instance; plus the drop count."""
    kept, dropped = [], 0
    for idx, item in enumerate(target.items):
        if item.weak is None:
            dropped += 1
            continue
        grouped = predict(model, item.image, HARVEST_SCORE_THRESHOLD, nms_threshold)
        labels = pseudo_label(grouped, item.weak, confidence_floor)
        if len(labels) == 0:
            dropped += 1
            continue
        kept.append((idx, labels))
    return kept, dropped


def build_plt(model: DetectorModel, target: Dataset, confidence_floor: float, round_index: int,
              augment: bool = False, paste: PasteParams = None, seed: int = 0) -> Dataset:
    """Pseudo-labelled target set for one round, optionally copy-paste augmented."""
    labelled, dropped = pseudo_label_dataset(model, target, confidence_floor)
    if dropped:
        logger.warning(f"PL round {round_index}: dropped {dropped}/{len(target)} images without pseudo-labels")
    items = []
    for idx, labels in labelled:
        item = target.items[idx]
        image = item.image
        if augment:
            image, labels = augment_pseudo_labeled(image, labels, paste or PasteParams(),
                                                   derive_rng(seed, "pl_aug", round_index, idx))
        items.append(DatasetItem(item.name, image, full=labels, weak=item.weak))
    tag = DomainTag.PLT2_AUG if augment else DomainTag.PLT1
    return target.with_items(items, domain_tag=tag)
