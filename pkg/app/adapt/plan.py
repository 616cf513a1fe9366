from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.adapt.copy_paste import PasteParams
from app.detector.model import DetectorHyper


class WarmupStage(str, Enum):
    PRETRAIN_S = "PRETRAIN_S"
    FT_G1 = "FT_G1"
    FT_G2 = "FT_G2"
    FT_PLT = "FT_PLT"
    FT_PLT_AUG = "FT_PLT_AUG"


PL_STAGES = (WarmupStage.FT_PLT, WarmupStage.FT_PLT_AUG)


def default_plan(pl_rounds: int = 2, skip_g2: bool = False) -> List[WarmupStage]:
    stages = [WarmupStage.PRETRAIN_S, WarmupStage.FT_G1]
    if not skip_g2:
        stages.append(WarmupStage.FT_G2)
    stages.extend([WarmupStage.FT_PLT] * (pl_rounds - 1))
    stages.append(WarmupStage.FT_PLT_AUG)
    return stages


NAMED_ORDERS: Dict[str, List[WarmupStage]] = {
    "S-G1-G2-PLT-AUG": default_plan(),
    "S-G2-G1-PLT-AUG": [WarmupStage.PRETRAIN_S, WarmupStage.FT_G2, WarmupStage.FT_G1,
                        WarmupStage.FT_PLT, WarmupStage.FT_PLT_AUG],
    "S-G1-G2-AUG-PLT": [WarmupStage.PRETRAIN_S, WarmupStage.FT_G1, WarmupStage.FT_G2,
                        WarmupStage.FT_PLT_AUG, WarmupStage.FT_PLT],
}


class WarmupPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stages: List[WarmupStage] = Field(default_factory=default_plan)
    pl_rounds: int = Field(default=2, ge=1)
    allow_reorder: bool = False
    stage_hyper: Dict[WarmupStage, DetectorHyper] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        if not self.stages or self.stages[0] != WarmupStage.PRETRAIN_S:
            raise ValueError("a warm-up plan must start with PRETRAIN_S")
        if WarmupStage.PRETRAIN_S in self.stages[1:]:
            raise ValueError("PRETRAIN_S may only appear first")
        if not self.allow_reorder:
            for i, stage in enumerate(self.stages):
                if stage == WarmupStage.FT_PLT_AUG and WarmupStage.FT_PLT not in self.stages[:i]:
                    raise ValueError("FT_PLT_AUG needs a prior FT_PLT unless allow_reorder is set")
        pl_count = sum(1 for s in self.stages if s in PL_STAGES)
        if pl_count and pl_count != self.pl_rounds:
            raise ValueError(f"plan has {pl_count} pseudo-label stages but pl_rounds={self.pl_rounds}")
        return self

    @classmethod
    def named(cls, name: str, **kwargs) -> "WarmupPlan":
        if name not in NAMED_ORDERS:
            raise ValueError(f"unknown stage order {name}; known: {sorted(NAMED_ORDERS)}")
        stages = list(NAMED_ORDERS[name])
        return cls(stages=stages, allow_reorder=stages != default_plan(), **kwargs)

    @classmethod
    def default(cls, pl_rounds: int = 2, skip_g2: bool = False) -> "WarmupPlan":
        # a single round can only be the augmented one
        return cls(stages=default_plan(pl_rounds, skip_g2), pl_rounds=pl_rounds, allow_reorder=pl_rounds == 1)


class WarmupConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    plan: WarmupPlan = Field(default_factory=WarmupPlan)
    paste: PasteParams = Field(default_factory=PasteParams)
    pl_paste: Optional[PasteParams] = None
    g1_alpha: float = Field(default=0.7, ge=0.0, le=1.0)
    confidence_floor: float = Field(default=0.5, ge=0.0, le=1.0)
    detector_mode: str = Field(default="anchor", pattern="^(anchor|query)$")
    pretrain: DetectorHyper = Field(default_factory=lambda: DetectorHyper(steps=400))
    finetune: DetectorHyper = Field(default_factory=lambda: DetectorHyper(steps=200))

    def hyper_for(self, stage: WarmupStage) -> DetectorHyper:
        if stage in self.plan.stage_hyper:
            return self.plan.stage_hyper[stage]
        return self.pretrain if stage == WarmupStage.PRETRAIN_S else self.finetune

    def resolved_pl_paste(self) -> PasteParams:
        return self.pl_paste or self.paste

    @classmethod
    def voc_like(cls, **kwargs) -> "WarmupConfig":
        """No G2 step and at most one extra copy per pseudo-labelled instance."""
        return cls(plan=WarmupPlan.default(skip_g2=True), pl_paste=PasteParams(max_paste_count=1), **kwargs)
