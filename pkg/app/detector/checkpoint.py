from pathlib import Path
from typing import Union

from app.detector.anchors import AnchorSpec
from app.detector.model import DetectorModel
from app.detector.pathway import FeatureSpec
from app.errors import ConfigError
from app.utils.serialization import decode_array, encode_array, read_json, write_json

DETECTOR_SCHEMA_VERSION = 1


def detector_to_record(model: DetectorModel) -> dict:
    return {
        "schema_version": DETECTOR_SCHEMA_VERSION,
        "kind": "detector",
        "num_classes": model.num_classes,
        "mode": model.mode,
        "num_queries": model.num_queries,
        "anchor_spec": model.anchor_spec.model_dump(mode="json"),
        "feature_spec": model.feature_spec.model_dump(mode="json"),
        "metadata": {
            "stage": model.stage,
            "seed": model.seed,
            "steps": model.steps,
            "final_lr": model.final_lr,
            "config_hash": model.config_hash,
            **model.extra,
        },
        "params": {name: encode_array(value) for name, value in sorted(model.params.items())},
    }


def detector_from_record(record: dict) -> DetectorModel:
    if record.get("kind") != "detector" or record.get("schema_version") != DETECTOR_SCHEMA_VERSION:
        raise ConfigError("not a detector checkpoint of a supported schema version")
    meta = dict(record["metadata"])
    known = {"stage", "seed", "steps", "final_lr", "config_hash"}
    return DetectorModel(
        num_classes=record["num_classes"],
        anchor_spec=AnchorSpec(**record["anchor_spec"]),
        feature_spec=FeatureSpec(**record["feature_spec"]),
        params={name: decode_array(value) for name, value in record["params"].items()},
        mode=record["mode"],
        num_queries=record["num_queries"],
        stage=meta.get("stage"),
        seed=meta.get("seed", 0),
        steps=meta.get("steps", 0),
        final_lr=meta.get("final_lr"),
        config_hash=meta.get("config_hash", ""),
        extra={k: v for k, v in meta.items() if k not in known},
    )


def save_detector(model: DetectorModel, path: Union[str, Path]):
    write_json(path, detector_to_record(model))


def load_detector(path: Union[str, Path]) -> DetectorModel:
    return detector_from_record(read_json(path))
