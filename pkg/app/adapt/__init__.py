from .copy_paste import (
    Composition, Donor, PasteParams, augment_pseudo_labeled, build_g2, copy_paste_compose, donors_from,
    resized_dims, transform_patch,
)
from .pseudo_label import build_plt, pseudo_label
from .plan import NAMED_ORDERS, WarmupConfig, WarmupPlan, WarmupStage, default_plan
from .graph import WarmupWorkflow, run_warmup, stage_tag
