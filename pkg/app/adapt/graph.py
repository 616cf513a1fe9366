"""Warm-up orchestrator: one LangGraph node per plan stage, wired in plan order."""
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from langgraph.graph import END, StateGraph

from app.adapt.copy_paste import build_g2
from app.adapt.plan import PL_STAGES, WarmupConfig, WarmupPlan, WarmupStage
from app.adapt.pseudo_label import build_plt
from app.adapt.state import WarmupState
from app.datamodel.types import Dataset
from app.detector.model import DetectorModel, init_detector
from app.detector.train import fit
from app.errors import PipelineError, StageError
from app.toyworld.generator import make_intermediate_g1, style_of
from app.toyworld.style import default_target_style
from app.utils.logger import logger
from app.utils.seeding import derive_seed

DetectorFactory = Callable[[int, int], DetectorModel]


def stage_tag(index: int) -> str:
    return f"FSOD-{index + 1}"


def node_name(index: int, stage: WarmupStage) -> str:
    return f"{index + 1:02d}_{stage.value}"


class WarmupWorkflow:

    def __init__(self, config: WarmupConfig, detector_factory: Optional[DetectorFactory] = None):
        self.config = config
        self.plan = config.plan
        self.detector_factory = detector_factory or self._default_factory
        self.workflow = self._build_workflow(self.plan)

    def _default_factory(self, num_classes: int, seed: int) -> DetectorModel:
        return init_detector(num_classes, seed, mode=self.config.detector_mode)

    def _g1(self, state: WarmupState) -> Dataset:
        if state["g1"] is None:
            target_style = style_of(state["target_train"], default_target_style(state["source"].num_classes))
            return make_intermediate_g1(state["source"], target_style, self.config.g1_alpha)
        return state["g1"]

    def _training_set(self, stage: WarmupStage, index: int, state: WarmupState) -> Tuple[Dataset, Dict[str, Any]]:
        updates: Dict[str, Any] = {}
        seed = state["seed"]
        if stage == WarmupStage.PRETRAIN_S:
            return state["source"], updates
        if stage == WarmupStage.FT_G1:
            updates["g1"] = self._g1(state)
            return updates["g1"], updates
        if stage == WarmupStage.FT_G2:
            g1 = self._g1(state)
            g2 = state["g2"]
            if g2 is None:
                g2 = build_g2(g1, state["backgrounds"], self.config.paste, derive_seed(seed, "g2"))
            updates.update(g1=g1, g2=g2)
            return g2, updates
        round_index = state["pl_round"] + 1
        updates["pl_round"] = round_index
        augment = stage == WarmupStage.FT_PLT_AUG
        ds = build_plt(state["model"], state["target_train"], self.config.confidence_floor, round_index,
                       augment=augment, paste=self.config.resolved_pl_paste(),
                       seed=derive_seed(seed, "pl", index))
        return ds, updates

    def stage_node(self, stage: WarmupStage, index: int, state: WarmupState) -> Dict[str, Any]:
        """Build the stage's training set, fine-tune the latest model on it, record FSOD-k."""
        tag = stage_tag(index)
        logger.log_stage(state["run_id"], f"{tag} {stage.value}", "started")
        try:
            ds, updates = self._training_set(stage, index, state)
            hyper = self.config.hyper_for(stage)
            stage_seed = derive_seed(state["seed"], "stage", index)
            if stage == WarmupStage.PRETRAIN_S:
                init = self.detector_factory(ds.num_classes, stage_seed)
            else:
                init = state["model"]
            if stage in PL_STAGES and len(ds) == 0:
                logger.warning(f"{tag}: no pseudo-labelled image survived; carrying the previous model forward")
                model = init.copy()
            else:
                model = fit(init, ds, hyper, seed=stage_seed)
            model.stage = index + 1
        except PipelineError as e:
            raise StageError(tag, f"{stage.value} failed: {e}", e) from e
        except Exception as e:
            logger.error(f"Stage {tag} ({stage.value}) crashed: {str(e)}")
            raise StageError(tag, f"{stage.value} crashed: {e}", e) from e

        summary = {"tag": tag, "stage": stage.value, "images": len(ds), "dataset": ds.domain_tag.value,
                   "steps": hyper.steps, "final_lr": model.final_lr}
        logger.log_stage(state["run_id"], f"{tag} {stage.value}", "completed")
        updates.update(
            model=model,
            checkpoints=state["checkpoints"] + [(tag, model)],
            current_stage=node_name(index, stage),
            history=state["history"] + [summary],
        )
        return updates

    def _node_for(self, stage: WarmupStage, index: int):
        def node(state: WarmupState) -> Dict[str, Any]:
            return self.stage_node(stage, index, state)
        return node

    def _build_workflow(self, plan: WarmupPlan):
        workflow = StateGraph(WarmupState)
        names = [node_name(i, stage) for i, stage in enumerate(plan.stages)]
        for i, (name, stage) in enumerate(zip(names, plan.stages)):
            workflow.add_node(name, self._node_for(stage, i))
        workflow.set_entry_point(names[0])
        for current, following in zip(names, names[1:]):
            workflow.add_edge(current, following)
        workflow.add_edge(names[-1], END)
        return workflow.compile()

    def run(self, source: Dataset, target_train: Dataset, backgrounds: Sequence[np.ndarray],
            seed: int, run_id: str = "") -> WarmupState:
        initial: WarmupState = {
            "run_id": run_id,
            "seed": seed,
            "source": source,
            "target_train": target_train,
            "backgrounds": list(backgrounds),
            "g1": None,
            "g2": None,
            "model": None,
            "checkpoints": [],
            "pl_round": 0,
            "current_stage": "",
            "history": [],
        }
        return self.workflow.invoke(initial, {"recursion_limit": len(self.plan.stages) + 5})


def run_warmup(plan: WarmupPlan, source: Dataset, target_train: Dataset, target_backgrounds: Sequence[np.ndarray],
               detector_factory: Optional[DetectorFactory] = None, seed: int = 0,
               config: Optional[WarmupConfig] = None, run_id: str = "") -> List[Tuple[str, DetectorModel]]:
    """Run the plan's stages in order and return every (FSOD-k, model) checkpoint."""
    config = (config or WarmupConfig()).model_copy(update={"plan": plan})
    final = WarmupWorkflow(config, detector_factory).run(source, target_train, target_backgrounds, seed, run_id)
    return final["checkpoints"]
