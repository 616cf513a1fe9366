"""Deterministic rasterizer for shape scenes.

Shapes are drawn as jittered polygons with PIL, blended over a patterned
background. Each shape's mask is cut to its annotated box, so the annotation
is exactly the placement list whatever the style does.
"""
import math
from typing import List, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image, ImageDraw, ImageFilter

from app.datamodel.types import FullAnnotation, SceneSpec
from app.toyworld.style import NUM_BACKGROUND_PATTERNS, StyleParams

SHAPES = ("circle", "triangle", "rectangle", "ellipse", "diamond", "ring")
# width / height of the box each shape is placed in
SHAPE_ASPECT = {"circle": 1.0, "triangle": 1.0, "rectangle": 0.6, "ellipse": 1.8,
                "diamond": 0.75, "ring": 1.0}
GOLDEN_RATIO_CONJUGATE = 0.618033988749895
ROUND_VERTICES = 24


def shape_for(class_id: int) -> str:
    return SHAPES[(class_id - 1) % len(SHAPES)]


def class_color(class_id: int, style: StyleParams) -> np.ndarray:
    hue = ((class_id - 1) * GOLDEN_RATIO_CONJUGATE + style.hue_shift) % 1.0
    return hsv_to_rgb(np.array([hue, style.saturation, 0.9], dtype=np.float64))


def _unit_outline(shape: str) -> List[Tuple[float, float]]:
    """Outline in unit box coordinates [0, 1]^2."""
    if shape in ("circle", "ellipse", "ring"):
        return [(0.5 + 0.5 * math.cos(2 * math.pi * k / ROUND_VERTICES),
                 0.5 + 0.5 * math.sin(2 * math.pi * k / ROUND_VERTICES)) for k in range(ROUND_VERTICES)]
    if shape == "triangle":
        return [(0.5, 0.0), (1.0, 1.0), (0.0, 1.0)]
    if shape == "diamond":
        return [(0.5, 0.0), (1.0, 0.5), (0.5, 1.0), (0.0, 0.5)]
    return [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


def _background(spec: SceneSpec, style: StyleParams, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    pattern_id = spec.background_id % NUM_BACKGROUND_PATTERNS
    frequency = 1 + spec.background_id // NUM_BACKGROUND_PATTERNS
    period = max(4.0, width / (2.0 + 2.0 * frequency))
    if pattern_id == 1:
        pattern = np.sin(2 * math.pi * xs / period)
    elif pattern_id == 2:
        pattern = np.where(((xs // period) + (ys // period)) % 2 == 0, 1.0, -1.0)
    elif pattern_id == 3:
        radius = np.hypot(xs - width / 2.0, ys - height / 2.0)
        pattern = np.cos(2 * math.pi * radius / period)
    else:
        pattern = np.zeros((height, width))
    base = np.asarray(style.background_color, dtype=np.float64)
    return base[None, None, :] + 0.5 * style.background_contrast * pattern[:, :, None]


def _shape_mask(shape: str, box, jitter: float, rng: np.random.Generator,
                height: int, width: int, edge_softness: float) -> np.ndarray:
    x0, y0, x1, y1 = box.as_tuple()
    w, h = x1 - x0, y1 - y0
    outline = _unit_outline(shape)
    offsets = rng.uniform(-1.0, 1.0, size=(len(outline), 2)) * jitter
    points = [(x0 + (u + du) * w, y0 + (v + dv) * h) for (u, v), (du, dv) in zip(outline, offsets)]
    mask_img = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(mask_img)
    draw.polygon(points, fill=255)
    if shape == "ring":
        inner = [(x0 + (0.5 + 0.55 * (u - 0.5)) * w, y0 + (0.5 + 0.55 * (v - 0.5)) * h) for u, v in outline]
        draw.polygon(inner, fill=0)
    if edge_softness > 0:
        mask_img = mask_img.filter(ImageFilter.GaussianBlur(radius=edge_softness))
    mask = np.asarray(mask_img, dtype=np.float64) / 255.0
    # pixel centres outside the box never receive shape colour
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    inside = ((rows >= y0) & (rows <= y1))[:, None] & ((cols >= x0) & (cols <= x1))[None, :]
    return mask * inside


def render_scene(spec: SceneSpec, style: StyleParams, seed: int,
                 height: int = 128, width: int = 128) -> Tuple[np.ndarray, FullAnnotation]:
    """Render a scene; deterministic in (spec, style, seed)."""
    canvas = _background(spec, style, height, width)
    for index, inst in enumerate(spec.placements):
        shape = shape_for(inst.class_id)
        # jitter depends on the instance, not its position, so shifted scenes render shifted
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, index])
        mask = _shape_mask(shape, inst.box, style.distortion_for(inst.class_id), rng,
                           height, width, style.edge_softness)
        color = class_color(inst.class_id, style)
        canvas = canvas * (1.0 - mask[:, :, None]) + color[None, None, :] * mask[:, :, None]
    if style.texture_noise > 0:
        noise_rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, len(spec.placements), 7])
        canvas = canvas + noise_rng.normal(0.0, style.texture_noise, size=canvas.shape)
    image = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    return image, spec.annotation()


def render_background(background_id: int, style: StyleParams, seed: int,
                      height: int = 128, width: int = 128) -> np.ndarray:
    image, _ = render_scene(SceneSpec((), background_id, seed), style, seed, height, width)
    return image


def crop_patch(image: np.ndarray, box) -> np.ndarray:
    """Tight pixel crop of a box (rounded to the pixel grid, at least 1x1)."""
    x0 = int(math.floor(box.x_min + 0.5))
    y0 = int(math.floor(box.y_min + 0.5))
    x1 = max(x0 + 1, int(math.floor(box.x_max + 0.5)))
    y1 = max(y0 + 1, int(math.floor(box.y_max + 0.5)))
    return np.array(image[y0:y1, x0:x1])
