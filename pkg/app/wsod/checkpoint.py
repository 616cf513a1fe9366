from pathlib import Path
from typing import Union

from app.detector.pathway import FeatureSpec
from app.errors import ConfigError
from app.utils.serialization import decode_array, encode_array, read_json, write_json
from app.wsod.model import WsodModel

WSOD_SCHEMA_VERSION = 1


def wsod_to_record(model: WsodModel) -> dict:
    return {
        "schema_version": WSOD_SCHEMA_VERSION,
        "kind": "wsod",
        "num_classes": model.num_classes,
        "variant": model.variant,
        "num_refinements": model.num_refinements,
        "feature_spec": model.feature_spec.model_dump(mode="json"),
        "proposals": {
            "use_detector": model.use_detector_proposals,
            "mode": model.proposal_mode,
            "min": model.min_proposals,
            "max": model.max_proposals,
        },
        "metadata": {
            "use_fe": model.use_fe,
            "seed": model.seed,
            "steps": model.steps,
            "config_hash": model.config_hash,
            **model.extra,
        },
        "params": {name: encode_array(value) for name, value in sorted(model.params.items())},
    }


def wsod_from_record(record: dict) -> WsodModel:
    if record.get("kind") != "wsod" or record.get("schema_version") != WSOD_SCHEMA_VERSION:
        raise ConfigError("not a WSOD checkpoint of a supported schema version")
    meta = dict(record["metadata"])
    proposals = record["proposals"]
    known = {"use_fe", "seed", "steps", "config_hash"}
    return WsodModel(
        num_classes=record["num_classes"],
        feature_spec=FeatureSpec(**record["feature_spec"]),
        params={name: decode_array(value) for name, value in record["params"].items()},
        variant=record["variant"],
        num_refinements=record["num_refinements"],
        use_fe=meta.get("use_fe", False),
        use_detector_proposals=proposals["use_detector"],
        proposal_mode=proposals["mode"],
        min_proposals=proposals["min"],
        max_proposals=proposals["max"],
        seed=meta.get("seed", 0),
        steps=meta.get("steps", 0),
        config_hash=meta.get("config_hash", ""),
        extra={k: v for k, v in meta.items() if k not in known},
    )


def save_wsod(model: WsodModel, path: Union[str, Path]):
    write_json(path, wsod_to_record(model))


def load_wsod(path: Union[str, Path]) -> WsodModel:
    return wsod_from_record(read_json(path))
