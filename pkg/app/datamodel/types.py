"""Annotation, detection and dataset types.

Class ids are 1-based (1..C). The background class used by refinement heads
is C+1 and is never stored in an annotation.
"""
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.geom import BoundingBox, boxes_to_array
from app.errors import DatasetValidationError, PreconditionError


def check_class_id(class_id: int, num_classes: int):
    if not (1 <= int(class_id) <= num_classes):
        raise PreconditionError(f"class id {class_id} outside [1, {num_classes}]")


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or not (0.0 <= self.score <= 1.0):
            raise PreconditionError(f"detection score must be a probability, got {self.score}")
        if self.class_id < 1:
            raise PreconditionError(f"class id must be >= 1, got {self.class_id}")


@dataclass(frozen=True)
class Instance:
    box: BoundingBox
    class_id: int


@dataclass(frozen=True)
class FullAnnotation:
    instances: Tuple[Instance, ...] = ()

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[BoundingBox, int]]) -> "FullAnnotation":
        return cls(tuple(Instance(box, int(c)) for box, c in pairs))

    def __len__(self) -> int:
        return len(self.instances)

    def boxes(self) -> np.ndarray:
        return boxes_to_array([inst.box for inst in self.instances])

    def classes(self) -> np.ndarray:
        return np.array([inst.class_id for inst in self.instances], dtype=np.int64)

    def of_class(self, class_id: int) -> "FullAnnotation":
        return FullAnnotation(tuple(i for i in self.instances if i.class_id == class_id))

    def union(self, other: "FullAnnotation") -> "FullAnnotation":
        return FullAnnotation(self.instances + other.instances)


@dataclass(frozen=True)
class WeakAnnotation:
    present: Tuple[int, ...]

    def __post_init__(self):
        if any(v not in (0, 1) for v in self.present):
            raise PreconditionError("weak annotation entries must be 0 or 1")

    @property
    def num_classes(self) -> int:
        return len(self.present)

    @property
    def popcount(self) -> int:
        return int(sum(self.present))

    def as_array(self) -> np.ndarray:
        return np.array(self.present, dtype=np.float64)

    def is_present(self, class_id: int) -> bool:
        return bool(self.present[class_id - 1])

    def present_classes(self) -> List[int]:
        return [c + 1 for c, v in enumerate(self.present) if v]


def weak_from_full(ann: FullAnnotation, num_classes: int) -> WeakAnnotation:
    present = [0] * num_classes
    for inst in ann.instances:
        check_class_id(inst.class_id, num_classes)
        present[inst.class_id - 1] = 1
    return WeakAnnotation(tuple(present))


class DomainTag(str, Enum):
    S = "S"
    G1 = "G1"
    G2 = "G2"
    PLT1 = "PLT1"
    PLT2_AUG = "PLT2-AUG"
    T = "T"
    T_EVAL = "T-EVAL"
    BG = "BG"


FULLY_ANNOTATED_TAGS = {DomainTag.S, DomainTag.G1, DomainTag.G2, DomainTag.PLT1, DomainTag.PLT2_AUG}


@dataclass(frozen=True)
class SceneSpec:
    """Placement provenance of a rendered scene; enough to re-render it under any style."""
    placements: Tuple[Instance, ...]
    background_id: int = 0
    render_seed: int = 0

    def annotation(self) -> FullAnnotation:
        return FullAnnotation(self.placements)


@dataclass(frozen=True, eq=False)
class DatasetItem:
    name: str
    image: np.ndarray
    full: Optional[FullAnnotation] = None
    weak: Optional[WeakAnnotation] = None
    hidden: Optional[FullAnnotation] = None
    scene: Optional[SceneSpec] = None

    def __post_init__(self):
        image = np.asarray(self.image)
        if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
            raise DatasetValidationError(f"item {self.name}: image must be uint8 HxWx3")
        if image.flags.writeable:
            image = image.copy()
            image.flags.writeable = False
        object.__setattr__(self, "image", image)


@dataclass(frozen=True, eq=False)
class Dataset:
    domain_tag: DomainTag
    class_names: Tuple[str, ...]
    height: int
    width: int
    items: Tuple[DatasetItem, ...] = ()
    style: Optional[Mapping[str, Any]] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "items", tuple(self.items))
        if self.style is not None:
            # JSON-normal form so in-memory and reloaded styles compare equal
            object.__setattr__(self, "style", json.loads(json.dumps(dict(self.style), sort_keys=True)))
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.items)

    def validate(self):
        tag = self.domain_tag
        for item in self.items:
            if item.image.shape[:2] != (self.height, self.width):
                raise DatasetValidationError(
                    f"item {item.name}: image {item.image.shape[:2]} does not match dataset "
                    f"{(self.height, self.width)}")
            if tag in FULLY_ANNOTATED_TAGS and item.full is None:
                raise DatasetValidationError(f"item {item.name}: {tag.value} items need full annotations")
            if tag == DomainTag.T and (item.weak is None or item.full is not None):
                raise DatasetValidationError(f"item {item.name}: T items carry only weak annotations")
            if tag == DomainTag.T_EVAL and item.hidden is None:
                raise DatasetValidationError(f"item {item.name}: T-EVAL items need hidden annotations")
            for ann in (item.full, item.hidden):
                if ann is not None:
                    self._validate_annotation(item.name, ann)
            if item.weak is not None and item.weak.num_classes != self.num_classes:
                raise DatasetValidationError(
                    f"item {item.name}: weak vector length {item.weak.num_classes} != C={self.num_classes}")

    def _validate_annotation(self, name: str, ann: FullAnnotation):
        for inst in ann.instances:
            if not inst.box.within(self.width, self.height):
                raise DatasetValidationError(f"item {name}: box {inst.box.as_tuple()} outside image")
            if not (1 <= inst.class_id <= self.num_classes):
                raise DatasetValidationError(f"item {name}: class id {inst.class_id} out of range")

    def with_items(self, items: Sequence[DatasetItem], domain_tag: Optional[DomainTag] = None,
                   style: Optional[Mapping[str, Any]] = None) -> "Dataset":
        return Dataset(domain_tag or self.domain_tag, self.class_names, self.height, self.width,
                       tuple(items), style if style is not None else self.style)


def structurally_equal(a: Dataset, b: Dataset) -> bool:
    if (a.domain_tag, a.class_names, a.height, a.width) != (b.domain_tag, b.class_names, b.height, b.width):
        return False
    if dict(a.style or {}) != dict(b.style or {}) or len(a.items) != len(b.items):
        return False
    for x, y in zip(a.items, b.items):
        if (x.name, x.full, x.weak, x.hidden, x.scene) != (y.name, y.full, y.weak, y.hidden, y.scene):
            return False
        if not np.array_equal(x.image, y.image):
            return False
    return True


def class_names_for(num_classes: int, names: Optional[Sequence[str]] = None) -> Tuple[str, ...]:
    if names:
        return tuple(names)
    return tuple(f"class_{c}" for c in range(1, num_classes + 1))

