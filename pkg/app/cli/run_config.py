"""Run configuration: one YAML file per run, every field defaulted, CLI flags override.

Config hashes chain through the pipeline (data -> warm-up -> WSOD) so an
artifact's hash changes whenever anything upstream of it changes.
"""
from pathlib import Path
from typing import List, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.adapt.plan import NAMED_ORDERS, WarmupConfig, WarmupPlan
from app.config import settings
from app.errors import ConfigError
from app.toyworld.generator import DomainConfig
from app.utils.serialization import sha256_of
from app.wsod.model import WsodHyper


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: str = Field(default="all-point", pattern="^(11-point|all-point)$")
    iou_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    score_threshold: float = Field(default=0.05, ge=0.0, le=1.0)
    nms_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    tide_fg_iou: float = Field(default=0.5, ge=0.0, le=1.0)
    tide_bg_iou: float = Field(default=0.1, ge=0.0, le=1.0)
    weak_available: bool = False


class AblationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    orders: List[str] = Field(default_factory=lambda: list(NAMED_ORDERS))
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = settings.DEFAULT_SEED
    data: DomainConfig = Field(default_factory=DomainConfig)
    warmup: WarmupConfig = Field(default_factory=WarmupConfig)
    wsod: WsodHyper = Field(default_factory=WsodHyper)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    output_dir: str = str(settings.RUNS_DIR / "default")

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        try:
            return cls(**raw)
        except ValidationError as e:
            raise ConfigError(f"config file {path} violates the schema: {e}") from e

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True), encoding="utf-8")
        return path

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       variant: Optional[str] = None, no_fe: bool = False, no_op: bool = False,
                       skip_g2: bool = False) -> "RunConfig":
        try:
            update = {}
            if seed is not None:
                update["seed"] = seed
            if out is not None:
                update["output_dir"] = out
            wsod_update = {}
            if variant is not None:
                wsod_update["variant"] = variant
            if no_fe:
                wsod_update["use_fe"] = False
            if no_op:
                wsod_update["use_detector_proposals"] = False
            if wsod_update:
                update["wsod"] = WsodHyper(**{**self.wsod.model_dump(), **wsod_update})
            if skip_g2:
                plan = WarmupPlan.default(pl_rounds=self.warmup.plan.pl_rounds, skip_g2=True)
                update["warmup"] = self.warmup.model_copy(update={"plan": plan})
            return self.model_copy(update=update)
        except ValidationError as e:
            raise ConfigError(f"invalid override: {e}") from e

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def data_hash(self) -> str:
        return sha256_of({"data": self.data.model_dump(mode="json"), "seed": self.seed})

    def warmup_hash(self) -> str:
        return sha256_of({"upstream": self.data_hash(), "warmup": self.warmup.model_dump(mode="json")})

    def wsod_hash(self) -> str:
        needs_detector = self.wsod.use_fe or self.wsod.use_detector_proposals
        upstream = self.warmup_hash() if needs_detector else self.data_hash()
        return sha256_of({"upstream": upstream, "wsod": self.wsod.model_dump(mode="json")})

    def ablation_hash(self) -> str:
        return sha256_of({"data": self.data.model_dump(mode="json"), "warmup": self.warmup.model_dump(mode="json"),
                          "eval": self.eval.model_dump(mode="json"),
                          "ablation": self.ablation.model_dump(mode="json")})

    def wsod_dir_name(self) -> str:
        name = self.wsod.variant
        if not self.wsod.use_fe:
            name += "-nofe"
        if not self.wsod.use_detector_proposals:
            name += "-noop"
        return name
