"""Copy-paste composition under a no-overlap constraint."""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.geom import BoundingBox, iou_matrix
from app.datamodel.types import Dataset, DatasetItem, DomainTag, FullAnnotation, Instance
from app.errors import PreconditionError
from app.toyworld.render import crop_patch
from app.utils.logger import logger
from app.utils.seeding import derive_rng


class PasteParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    resize_ratio_range: Tuple[float, float] = (0.8, 1.2)
    allow_hflip: bool = True
    allow_vflip: bool = True
    max_paste_count: int = Field(default=20, ge=0)
    max_attempts: int = Field(default=50, ge=1)

    @model_validator(mode="after")
    def _check_range(self):
        lo, hi = self.resize_ratio_range
        if not (0 < lo <= hi):
            raise ValueError("resize_ratio_range must satisfy 0 < lo <= hi")
        return self


@dataclass(frozen=True)
class Donor:
    patch: np.ndarray
    class_id: int


@dataclass(frozen=True)
class Composition:
    image: np.ndarray
    annotation: FullAnnotation
    pasted: int
    skipped: int


def resized_dims(width: int, height: int, ratio: float, params: PasteParams) -> Optional[Tuple[int, int]]:
    """Integer target size per axis, kept inside [dim*lo, dim*hi]; None if no integer fits."""
    lo, hi = params.resize_ratio_range
    dims = []
    for dim in (width, height):
        low, high = math.ceil(dim * lo - 1e-9), math.floor(dim * hi + 1e-9)
        if low > high or high < 1:
            return None
        dims.append(int(min(max(round(dim * ratio), low), high)))
    return dims[0], dims[1]


def transform_patch(patch: np.ndarray, size: Tuple[int, int], hflip: bool, vflip: bool) -> np.ndarray:
    """Flip then resize (bilinear) to (width, height)."""
    out = patch
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1, :]
    img = Image.fromarray(np.ascontiguousarray(out))
    if img.size != tuple(size):
        img = img.resize(tuple(size), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def copy_paste_compose(donors: Sequence[Donor], canvas: np.ndarray, existing: FullAnnotation,
                       params: PasteParams, rng: np.random.Generator) -> Composition:
    """Paste donors one by one at uniform positions with IoU 0 to every box already present."""
    image = np.array(canvas, dtype=np.uint8, copy=True)
    height, width = image.shape[:2]
    lo, _ = params.resize_ratio_range
    instances: List[Instance] = list(existing.instances)
    occupied = existing.boxes()
    pasted = skipped = 0
    for donor in donors:
        ph, pw = donor.patch.shape[:2]
        ratio = float(rng.uniform(*params.resize_ratio_range))
        hflip = bool(params.allow_hflip and rng.random() < 0.5)
        vflip = bool(params.allow_vflip and rng.random() < 0.5)
        dims = resized_dims(pw, ph, ratio, params)
        if dims is None or math.ceil(pw * lo) > width or math.ceil(ph * lo) > height \
                or dims[0] > width or dims[1] > height:
            skipped += 1
            continue
        new_w, new_h = dims
        placed = None
        for _ in range(params.max_attempts):
            x = int(rng.integers(0, width - new_w + 1))
            y = int(rng.integers(0, height - new_h + 1))
            box = np.array([[x, y, x + new_w, y + new_h]], dtype=np.float64)
            if occupied.shape[0] == 0 or iou_matrix(box, occupied).max() == 0.0:
                placed = (x, y)
                break
        if placed is None:
            skipped += 1
            continue
        x, y = placed
        image[y:y + new_h, x:x + new_w] = transform_patch(donor.patch, (new_w, new_h), hflip, vflip)
        instances.append(Instance(BoundingBox(x, y, x + new_w, y + new_h), donor.class_id))
        occupied = np.vstack([occupied, [[x, y, x + new_w, y + new_h]]])
        pasted += 1
    return Composition(image, FullAnnotation(tuple(instances)), pasted, skipped)


def donors_from(image: np.ndarray, annotation: FullAnnotation) -> List[Donor]:
    return [Donor(crop_patch(image, inst.box), inst.class_id) for inst in annotation.instances]


def build_g2(g1: Dataset, target_backgrounds: Sequence[np.ndarray], params: PasteParams, seed: int) -> Dataset:
    """Paste a random subset of each G1 item's instances onto a sampled target background."""
    if len(target_backgrounds) == 0:
        raise PreconditionError("build_g2 needs at least one target background image")
    items = []
    skipped_total = 0
    for idx, item in enumerate(g1.items):
        if item.full is None:
            raise PreconditionError(f"G1 item {item.name} lacks a full annotation")
        rng = derive_rng(seed, "g2", idx)
        background = target_backgrounds[int(rng.integers(len(target_backgrounds)))]
        donors = donors_from(item.image, item.full)
        if donors and params.max_paste_count > 0:
            k = int(rng.integers(1, min(len(donors), params.max_paste_count) + 1))
            chosen = sorted(int(i) for i in rng.choice(len(donors), size=k, replace=False))
            donors = [donors[i] for i in chosen]
        else:
            donors = []
        result = copy_paste_compose(donors, background, FullAnnotation(), params, rng)
        skipped_total += result.skipped
        items.append(DatasetItem(f"g2_{idx:05d}", result.image, full=result.annotation))
    if skipped_total:
        logger.warning(f"G2 construction skipped {skipped_total} pastes that found no free position")
    return g1.with_items(items, domain_tag=DomainTag.G2)


def augment_pseudo_labeled(image: np.ndarray, pl: FullAnnotation, params: PasteParams,
                           rng: np.random.Generator) -> Tuple[np.ndarray, FullAnnotation]:
    """Duplicate each pseudo-labelled instance 0..L times onto the same image."""
    if params.max_paste_count == 0 or len(pl) == 0:
        return np.array(image, copy=True), pl
    donors = []
    for donor in donors_from(image, pl):
        donors.extend([donor] * int(rng.integers(0, params.max_paste_count + 1)))
    result = copy_paste_compose(donors, image, pl, params, rng)
    if result.skipped:
        logger.debug(f"Pseudo-label augmentation skipped {result.skipped} of {len(donors)} pastes")
    return result.image, result.annotation
