from .style import StyleParams, default_source_style, default_target_style, shift_style
from .render import render_scene, render_background, crop_patch, class_color, shape_for
from .generator import (
    DomainConfig, GeneratedWorld, generate_domain, make_intermediate_g1, sample_scene, background_images,
)
