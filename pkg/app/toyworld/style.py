"""Parametric appearance styles and the geometry-preserving style shifter."""
from typing import Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.errors import StyleError

NUM_BACKGROUND_PATTERNS = 4


class StyleParams(BaseModel):
    """Everything that controls appearance; geometry lives in SceneSpec.

    Ranges:
        background_color       RGB in [0, 1]
        background_contrast    [0, 1], amplitude of the background pattern
        texture_noise          [0, 0.5], std of additive pixel noise
        hue_shift              [-0.5, 0.5], added to every class hue
        saturation             [0, 1]
        edge_softness          [0, 4], gaussian blur radius of shape edges
        distortion             per-class vertex jitter in [0, 0.3] of the box size
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    background_color: Tuple[float, float, float] = (0.85, 0.80, 0.70)
    background_contrast: float = Field(default=0.15, ge=0.0, le=1.0)
    texture_noise: float = Field(default=0.02, ge=0.0, le=0.5)
    hue_shift: float = Field(default=0.0, ge=-0.5, le=0.5)
    saturation: float = Field(default=0.85, ge=0.0, le=1.0)
    edge_softness: float = Field(default=0.0, ge=0.0, le=4.0)
    distortion: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @field_validator("background_color")
    @classmethod
    def _check_color(cls, value):
        if any(not (0.0 <= v <= 1.0) for v in value):
            raise ValueError("background_color components must lie in [0, 1]")
        return value

    @field_validator("distortion")
    @classmethod
    def _check_distortion(cls, value):
        if any(not (0.0 <= v <= 0.3) for v in value):
            raise ValueError("distortion magnitudes must lie in [0, 0.3]")
        return value

    def distortion_for(self, class_id: int) -> float:
        if not self.distortion:
            return 0.0
        return self.distortion[(class_id - 1) % len(self.distortion)]


def default_source_style(num_classes: int = 6) -> StyleParams:
    return StyleParams(distortion=(0.0,) * num_classes)


def default_target_style(num_classes: int = 6) -> StyleParams:
    return StyleParams(
        background_color=(0.30, 0.35, 0.42),
        background_contrast=0.45,
        texture_noise=0.08,
        hue_shift=0.12,
        saturation=0.55,
        edge_softness=1.5,
        distortion=(0.12,) * num_classes,
    )


def _lerp(a: float, b: float, alpha: float) -> float:
    return a * (1.0 - alpha) + b * alpha


def shift_style(source: StyleParams, target: StyleParams, alpha: float) -> StyleParams:
    """Componentwise interpolation; alpha=0 gives source, alpha=1 gives target."""
    if not (0.0 <= alpha <= 1.0):
        raise StyleError(f"alpha must lie in [0, 1], got {alpha}")
    if len(source.distortion) != len(target.distortion):
        raise StyleError("source and target styles declare different class counts")
    if alpha == 0.0:
        return source
    if alpha == 1.0:
        return target
    return StyleParams(
        background_color=tuple(_lerp(a, b, alpha) for a, b in zip(source.background_color,
                                                                  target.background_color)),
        background_contrast=_lerp(source.background_contrast, target.background_contrast, alpha),
        texture_noise=_lerp(source.texture_noise, target.texture_noise, alpha),
        hue_shift=_lerp(source.hue_shift, target.hue_shift, alpha),
        saturation=_lerp(source.saturation, target.saturation, alpha),
        edge_softness=_lerp(source.edge_softness, target.edge_softness, alpha),
        distortion=tuple(_lerp(a, b, alpha) for a, b in zip(source.distortion, target.distortion)),
    )
