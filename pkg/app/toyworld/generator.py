"""Dual-domain world generation and source-to-target label transfer."""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.geom import BoundingBox, iou_matrix
from app.datamodel.types import (
    Dataset, DatasetItem, DomainTag, FullAnnotation, Instance, SceneSpec, class_names_for, weak_from_full,
)
from app.errors import MissingSceneError
from app.toyworld.render import SHAPE_ASPECT, render_scene, shape_for
from app.toyworld.style import StyleParams, default_source_style, default_target_style, shift_style
from app.utils.logger import logger
from app.utils.seeding import derive_rng, derive_seed

MAX_PLACEMENT_ATTEMPTS = 100
NUM_BACKGROUND_IDS = 16


class DomainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(default=6, ge=1)
    class_names: Optional[List[str]] = None
    height: int = Field(default=128, ge=16)
    width: int = Field(default=128, ge=16)
    num_source: int = Field(default=200, ge=0)
    num_target_train: int = Field(default=200, ge=0)
    num_target_eval: int = Field(default=100, ge=0)
    num_backgrounds: int = Field(default=50, ge=0)
    min_instances: int = Field(default=1, ge=0)
    max_instances: int = Field(default=8, ge=0)
    min_size: float = Field(default=14.0, gt=1.0)
    max_size: float = Field(default=40.0, gt=1.0)
    class_mixture: Optional[List[float]] = None
    source_style: Optional[StyleParams] = None
    target_style: Optional[StyleParams] = None

    @model_validator(mode="after")
    def _check(self):
        if self.min_instances > self.max_instances:
            raise ValueError("min_instances must not exceed max_instances")
        if self.min_size > self.max_size:
            raise ValueError("min_size must not exceed max_size")
        if self.max_size * math.sqrt(max(SHAPE_ASPECT.values())) > min(self.height, self.width):
            raise ValueError("max_size does not fit the canvas")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError("class_names must have num_classes entries")
        if self.class_mixture is not None:
            if len(self.class_mixture) != self.num_classes:
                raise ValueError("class_mixture must have num_classes entries")
            if any(w < 0 for w in self.class_mixture) or sum(self.class_mixture) <= 0:
                raise ValueError("class_mixture weights must be non-negative with positive sum")
        return self

    def mixture(self) -> np.ndarray:
        if self.class_mixture is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        weights = np.asarray(self.class_mixture, dtype=np.float64)
        return weights / weights.sum()

    def resolved_source_style(self) -> StyleParams:
        return self.source_style or default_source_style(self.num_classes)

    def resolved_target_style(self) -> StyleParams:
        return self.target_style or default_target_style(self.num_classes)


@dataclass(frozen=True)
class GeneratedWorld:
    source: Dataset
    target_train: Dataset
    target_eval: Dataset
    backgrounds: Dataset

    def all(self) -> List[Dataset]:
        return [self.source, self.target_train, self.target_eval, self.backgrounds]


def sample_scene(config: DomainConfig, rng: np.random.Generator) -> SceneSpec:
    """Non-overlapping placements; an instance that cannot be placed keeps its class on retry."""
    count = int(rng.integers(config.min_instances, config.max_instances + 1))
    mixture = config.mixture()
    placed: List[Instance] = []
    for _ in range(count):
        class_id = int(rng.choice(config.num_classes, p=mixture)) + 1
        aspect = SHAPE_ASPECT[shape_for(class_id)]
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            size = rng.uniform(config.min_size, config.max_size)
            w = float(min(config.width, round(size * math.sqrt(aspect))))
            h = float(min(config.height, round(size / math.sqrt(aspect))))
            x0 = float(rng.integers(0, int(config.width - w) + 1))
            y0 = float(rng.integers(0, int(config.height - h) + 1))
            box = BoundingBox(x0, y0, x0 + w, y0 + h)
            if placed and iou_matrix(box.as_array(), FullAnnotation(tuple(placed)).boxes()).max() > 0:
                continue
            placed.append(Instance(box, class_id))
            break
        else:
            logger.debug(f"Dropped class {class_id} instance after {MAX_PLACEMENT_ATTEMPTS} placement attempts")
    background_id = int(rng.integers(0, NUM_BACKGROUND_IDS))
    render_seed = int(rng.integers(0, 2 ** 31 - 1))
    return SceneSpec(tuple(placed), background_id, render_seed)


def _build(config: DomainConfig, seed: int, stream: str, count: int, tag: DomainTag,
           style: StyleParams, empty_scenes: bool = False) -> Dataset:
    items = []
    for idx in range(count):
        rng = derive_rng(seed, stream, idx)
        spec = sample_scene(config, rng)
        if empty_scenes:
            spec = SceneSpec((), spec.background_id, spec.render_seed)
        image, truth = render_scene(spec, style, spec.render_seed, config.height, config.width)
        name = f"{tag.value.lower()}_{idx:05d}"
        if tag == DomainTag.S:
            item = DatasetItem(name, image, full=truth, scene=spec)
        elif tag == DomainTag.T:
            item = DatasetItem(name, image, weak=weak_from_full(truth, config.num_classes),
                               hidden=truth, scene=spec)
        elif tag == DomainTag.T_EVAL:
            item = DatasetItem(name, image, weak=weak_from_full(truth, config.num_classes),
                               hidden=truth, scene=spec)
        else:
            item = DatasetItem(name, image, scene=spec)
        items.append(item)
    return Dataset(tag, class_names_for(config.num_classes, config.class_names), config.height,
                   config.width, tuple(items), style.model_dump(mode="json"))


def generate_domain(config: DomainConfig, seed: int) -> GeneratedWorld:
    """Source (S), weak target train (T), target eval (T-EVAL) and background canvases (BG)."""
    source_style = config.resolved_source_style()
    target_style = config.resolved_target_style()
    world = GeneratedWorld(
        source=_build(config, seed, "source", config.num_source, DomainTag.S, source_style),
        target_train=_build(config, seed, "target_train", config.num_target_train, DomainTag.T, target_style),
        target_eval=_build(config, seed, "target_eval", config.num_target_eval, DomainTag.T_EVAL, target_style),
        backgrounds=_build(config, seed, "backgrounds", config.num_backgrounds, DomainTag.BG, target_style,
                           empty_scenes=True),
    )
    logger.info(f"Generated world seed={seed}: " + ", ".join(f"{ds.domain_tag.value}={len(ds)}" for ds in world.all()))
    return world


def style_of(ds: Dataset, fallback: StyleParams) -> StyleParams:
    return StyleParams(**ds.style) if ds.style else fallback


def make_intermediate_g1(source: Dataset, target_style: StyleParams, alpha: float = 0.7,
                         seed: Optional[int] = None) -> Dataset:
    """Re-render every source scene under the shifted style, copying annotations verbatim.

    Noise is re-drawn from each scene's own render seed, so alpha=0 reproduces the
    source images bit for bit. Passing ``seed`` re-draws noise from seeds derived from it.
    """
    shifted = shift_style(style_of(source, default_source_style(source.num_classes)), target_style, alpha)
    items = []
    for item in source.items:
        if item.scene is None:
            raise MissingSceneError(f"source item {item.name} has no scene spec to re-render")
        render_seed = item.scene.render_seed if seed is None else derive_seed(seed, item.scene.render_seed)
        image, _ = render_scene(item.scene, shifted, render_seed, source.height, source.width)
        items.append(DatasetItem(item.name, image, full=item.full, scene=item.scene))
    return source.with_items(items, domain_tag=DomainTag.G1, style=shifted.model_dump(mode="json"))


def background_images(ds: Dataset) -> Sequence[np.ndarray]:
    return [item.image for item in ds.items]
