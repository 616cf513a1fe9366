"""Weak detector: shared pathway + two shared FC layers + MIL streams + refinement heads.

Total per-image objective with frozen targets (refinement labels and attention
aggregates computed at the start of the step):

    oicr:  L_mlc + lambda_d * sum_p L_ref^p
    casd:  L_mlc + sum_p (lambda_d L_ref^p + lambda_g L_reg^p + lambda_i L_IW + lambda_i L_LW)
"""
import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.datamodel.types import WeakAnnotation
from app.detector.features import ImageFeatures
from app.detector.model import DetectorModel, softmax
from app.detector.pathway import (
    FeatureSpec, Params, PooledBoxes, dense, dense_backward, embed_backward, embed_forward, init_embedding,
    pool_boxes, relu,
)
from app.errors import PreconditionError
from app.utils.logger import logger
from app.wsod.casd import (
    DEFAULT_TRANSFORMS, CasdTransform, MemberCells, casd_member_loss, input_wise_cells, layer_wise_cells,
)
from app.wsod.heads import (
    Assignment, ScoreMatrices, mlc_loss, oicr_assign, refinement_loss, regression_loss, softmax_backward,
    stage_scores, wsddn_backward, wsddn_scores,
)

WSOD_VARIANTS = ("oicr", "casd")


class WsodHyper(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: str = Field(default="casd", pattern="^(oicr|casd)$")
    num_refinements: int = Field(default=3, ge=1)
    lambda_d: float = Field(default=1.0, ge=0)
    lambda_g: float = Field(default=1.0, ge=0)
    lambda_i: float = Field(default=0.1, ge=0)
    steps: int = Field(default=400, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    use_fe: bool = True
    use_detector_proposals: bool = True
    proposal_mode: Optional[str] = Field(default=None, pattern="^(class-filtered|all)$")
    min_proposals: int = Field(default=20, ge=0)
    max_proposals: int = Field(default=100, ge=1)
    transforms: Tuple[CasdTransform, ...] = DEFAULT_TRANSFORMS
    log_every: int = Field(default=50, ge=1)


@dataclass
class WsodModel:
    num_classes: int
    feature_spec: FeatureSpec
    params: Params
    variant: str = "casd"
    num_refinements: int = 3
    use_fe: bool = True
    use_detector_proposals: bool = True
    proposal_mode: str = "class-filtered"
    min_proposals: int = 20
    max_proposals: int = 100
    seed: int = 0
    steps: int = 0
    config_hash: str = ""
    extra: Dict[str, str] = field(default_factory=dict)

    def copy(self) -> "WsodModel":
        clone = copy.copy(self)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.extra = dict(self.extra)
        return clone


def _head_names(index: int) -> Tuple[str, str, str, str]:
    return f"ref{index}_w", f"ref{index}_b", f"reg{index}_w", f"reg{index}_b"


def init_wsod(num_classes: int, hyper: WsodHyper, seed: int = 0, feature_spec: Optional[FeatureSpec] = None,
              detector: Optional[DetectorModel] = None) -> WsodModel:
    """Random init; with use_fe and a detector, the embedding and first shared FC come from it."""
    feature_spec = feature_spec or (detector.feature_spec if detector is not None else FeatureSpec())
    rng = np.random.default_rng(seed)
    d_in, d = feature_spec.input_dim, feature_spec.hidden_dim
    params: Params = {}
    init_embedding(params, feature_spec, rng)
    params["fc1_w"] = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d, d_in))
    params["fc1_b"] = np.zeros(d)
    params["fc2_w"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, d))
    params["fc2_b"] = np.zeros(d)
    params["cls_w"] = rng.normal(0.0, 0.01, size=(num_classes, d))
    params["cls_b"] = np.zeros(num_classes)
    params["det_w"] = rng.normal(0.0, 0.01, size=(num_classes, d))
    params["det_b"] = np.zeros(num_classes)
    for p in range(hyper.num_refinements):
        ref_w, ref_b, reg_w, reg_b = _head_names(p)
        params[ref_w] = rng.normal(0.0, 0.01, size=(num_classes + 1, d))
        params[ref_b] = np.zeros(num_classes + 1)
        params[reg_w] = np.zeros((4, d))
        params[reg_b] = np.zeros(4)

    use_fe = hyper.use_fe and detector is not None
    if use_fe:
        aligned = (detector.feature_spec == feature_spec
                   and detector.params["hidden_w"].shape == params["fc1_w"].shape)
        if aligned:
            for name, value in detector.params.items():
                if name.startswith("embed_"):
                    params[name] = value.copy()
            params["fc1_w"] = detector.params["hidden_w"].copy()
            params["fc1_b"] = detector.params["hidden_b"].copy()
            params["fc2_w"] = np.eye(d)
        else:
            logger.warning("Detector pathway does not match the WSOD feature spec; +FE init skipped")
            use_fe = False
    return WsodModel(num_classes, feature_spec, params, variant=hyper.variant,
                     num_refinements=hyper.num_refinements, use_fe=use_fe,
                     use_detector_proposals=hyper.use_detector_proposals, min_proposals=hyper.min_proposals,
                     max_proposals=hyper.max_proposals, seed=seed)


@dataclass
class WsodImage:
    """Everything about one image that does not depend on the parameters."""
    image: np.ndarray
    boxes: np.ndarray
    pooled: PooledBoxes
    iw: List[MemberCells]
    lw: List[MemberCells]


def prepare_image(image: np.ndarray, boxes: np.ndarray, spec: FeatureSpec, with_casd: bool,
                  transforms: Sequence[CasdTransform] = DEFAULT_TRANSFORMS) -> WsodImage:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        raise PreconditionError("an image needs at least one proposal")
    pooled = pool_boxes(ImageFeatures(image, spec.resolved_blocks()), boxes, spec.grid)
    iw = input_wise_cells(image, boxes, spec, transforms) if with_casd else []
    lw = layer_wise_cells(image, boxes, spec) if with_casd else []
    return WsodImage(image, boxes, pooled, iw, lw)


def shared_features(params: Params, pooled: PooledBoxes):
    """(x (M, d_in), f (M, d), cache)."""
    x, embed_cache = embed_forward(params, pooled)
    pre1 = dense(x, params["fc1_w"], params["fc1_b"])
    h1 = relu(pre1)
    pre2 = dense(h1, params["fc2_w"], params["fc2_b"])
    return x, relu(pre2), (embed_cache, pre1, h1, pre2)


def wsddn_forward(V: np.ndarray, model: WsodModel) -> ScoreMatrices:
    """Score matrices from input features V (d_in x M)."""
    V = np.asarray(V, dtype=np.float64)
    if not np.all(np.isfinite(V)):
        raise PreconditionError("proposal features must be finite")
    if V.ndim != 2 or V.shape[1] < 1:
        raise PreconditionError("need at least one proposal")
    params = model.params
    h1 = relu(dense(V.T, params["fc1_w"], params["fc1_b"]))
    f = relu(dense(h1, params["fc2_w"], params["fc2_b"]))
    return _scores(params, f, model.num_refinements)


def _scores(params: Params, f: np.ndarray, num_refinements: int) -> ScoreMatrices:
    x_cls = dense(f, params["cls_w"], params["cls_b"]).T
    x_det = dense(f, params["det_w"], params["det_b"]).T
    cls_soft, det_soft, x0, p = wsddn_scores(x_cls, x_det)
    refs, ref_logits, regs = [], [], []
    for head in range(num_refinements):
        ref_w, ref_b, reg_w, reg_b = _head_names(head)
        logits = dense(f, params[ref_w], params[ref_b]).T
        ref_logits.append(logits)
        refs.append(softmax(logits, axis=0))
        regs.append(dense(f, params[reg_w], params[reg_b]).T)
    return ScoreMatrices(x_cls, x_det, cls_soft, det_soft, x0, p, refs, ref_logits, regs)


def image_scores(model: WsodModel, item: WsodImage) -> ScoreMatrices:
    _, f, _ = shared_features(model.params, item.pooled)
    return _scores(model.params, f, model.num_refinements)


@dataclass
class WsodTargets:
    assignments: List[Assignment]
    iw_aggregate: Optional[np.ndarray]
    lw_aggregate: Optional[np.ndarray]


def compute_targets(model: WsodModel, item: WsodImage, weak: WeakAnnotation) -> WsodTargets:
    """Refinement labels and attention aggregates for one step, held fixed while differentiating."""
    scores = image_scores(model, item)
    assignments = [oicr_assign(stage_scores(scores, head, model.num_classes), item.boxes, weak)
                   for head in range(model.num_refinements)]
    iw_agg = lw_agg = None
    if model.variant == "casd" and item.iw:
        _, _, iw_agg = casd_member_loss(model.params, item.iw, weight=0.0)
        _, _, lw_agg = casd_member_loss(model.params, item.lw, weight=0.0)
    return WsodTargets(assignments, iw_agg, lw_agg)


def wsod_loss(model: WsodModel, item: WsodImage, weak: WeakAnnotation, targets: WsodTargets,
              hyper: WsodHyper) -> Tuple[float, Dict[str, float], Params]:
    """Total loss, its named parts and gradients for one image."""
    params = model.params
    x, f, (embed_cache, pre1, h1, pre2) = shared_features(params, item.pooled)
    scores = _scores(params, f, model.num_refinements)
    grads: Params = {}
    parts: Dict[str, float] = {}

    loss_mlc, grad_p = mlc_loss(scores.p, weak)
    parts["mlc"] = loss_mlc
    grad_x0 = np.repeat(grad_p[:, None], scores.x0.shape[1], axis=1)
    grad_cls, grad_det = wsddn_backward(scores, grad_x0)
    grad_f, grads["cls_w"], grads["cls_b"] = dense_backward(f, params["cls_w"], grad_cls.T)
    grad_f_det, grads["det_w"], grads["det_b"] = dense_backward(f, params["det_w"], grad_det.T)
    grad_f = grad_f + grad_f_det

    use_casd = model.variant == "casd"
    total = loss_mlc
    parts["ref"] = parts["reg"] = 0.0
    for head, assignment in enumerate(targets.assignments):
        ref_w, ref_b, reg_w, reg_b = _head_names(head)
        loss_ref, grad_prob = refinement_loss(scores.x_ref[head], assignment.labels, assignment.weights)
        grad_logits = hyper.lambda_d * softmax_backward(scores.x_ref[head], grad_prob, axis=0)
        g_f, grads[ref_w], grads[ref_b] = dense_backward(f, params[ref_w], grad_logits.T)
        grad_f = grad_f + g_f
        total += hyper.lambda_d * loss_ref
        parts["ref"] += loss_ref
        if use_casd:
            loss_reg, grad_reg = regression_loss(scores.reg[head], assignment.labels, assignment.seed_boxes,
                                                 item.boxes, model.num_classes)
            g_f, grads[reg_w], grads[reg_b] = dense_backward(f, params[reg_w], hyper.lambda_g * grad_reg.T)
            grad_f = grad_f + g_f
            total += hyper.lambda_g * loss_reg
            parts["reg"] += loss_reg
        else:
            grads[reg_w] = np.zeros_like(params[reg_w])
            grads[reg_b] = np.zeros_like(params[reg_b])

    grad_pre2 = grad_f * (pre2 > 0)
    grad_h1, grads["fc2_w"], grads["fc2_b"] = dense_backward(h1, params["fc2_w"], grad_pre2)
    grad_pre1 = grad_h1 * (pre1 > 0)
    grad_x, grads["fc1_w"], grads["fc1_b"] = dense_backward(x, params["fc1_w"], grad_pre1)
    embed_backward(params, item.pooled, embed_cache, grad_x, grads)

    parts["iw"] = parts["lw"] = 0.0
    if use_casd and item.iw and hyper.lambda_i > 0:
        # the consistency terms sit inside the per-head sum
        weight = hyper.lambda_i * model.num_refinements
        loss_iw, grads, _ = casd_member_loss(params, item.iw, targets.iw_aggregate, weight, grads)
        loss_lw, grads, _ = casd_member_loss(params, item.lw, targets.lw_aggregate, weight, grads)
        total += loss_iw + loss_lw
        parts["iw"], parts["lw"] = loss_iw / weight, loss_lw / weight
    return float(total), parts, grads
