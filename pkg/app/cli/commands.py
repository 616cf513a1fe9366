"""Pipeline commands. Each one is idempotent for a given config and seed.

Layout of a run directory:

    data/        source, target_train, target_eval, backgrounds
    warmup/      FSOD-1.json .. FSOD-k.json, stages.csv, stages_map.svg
    wsod/<name>/ model.json
    eval/<name>/ ap.csv, tide.csv, errors.svg, summary.json
    ablation/    orders.csv, orders.svg
    report.md
"""
import shutil
import uuid
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Generator, List, Optional, Sequence, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader

from app.adapt.graph import WarmupWorkflow
from app.adapt.plan import WarmupPlan
from app.cli.artifacts import is_current, read_manifest, require_current, write_manifest
from app.cli.run_config import EvalConfig, RunConfig
from app.config import settings
from app.database.operations import db_ops
from app.datamodel.storage import load_dataset, save_dataset
from app.datamodel.types import Dataset, Detection
from app.detector.checkpoint import detector_from_record, load_detector, save_detector
from app.detector.model import DetectorModel
from app.detector.predict import flatten, predict
from app.errors import MissingArtifactError, PipelineError, StageError
from app.eval.ap import ApResult, evaluate_detections
from app.eval.charts import ablation_chart, error_chart, stage_map_chart
from app.eval.report import read_csv, write_ablation_csv, write_ap_csv, write_stage_csv, write_tide_csv
from app.eval.tide import ErrorBreakdown, tide_dataset
from app.toyworld.generator import GeneratedWorld, background_images, generate_domain
from app.utils.logger import logger
from app.utils.serialization import file_digest, read_json, sha256_of, write_json
from app.wsod.checkpoint import save_wsod, wsod_from_record
from app.wsod.infer import wsod_infer
from app.wsod.model import WsodModel
from app.wsod.train import train_wsod

DATASET_DIRS = ("source", "target_train", "target_eval", "backgrounds")
EXPECTED_ORDER_TRENDS = (
    ("S-G1-G2-PLT-AUG", "S-G2-G1-PLT-AUG"),
    ("S-G1-G2-PLT-AUG", "S-G1-G2-AUG-PLT"),
)


@contextmanager
def ledger_run(command: str, config: RunConfig, config_hash: str) -> Generator[str, None, None]:
    run_id = f"{command}-{uuid.uuid4().hex[:12]}"
    db_ops.create_run(run_id, command, config_hash, config.seed, str(config.out))
    try:
        yield run_id
    except PipelineError as e:
        db_ops.finish_run(run_id, "failed", e.to_record())
        raise
    except Exception as e:
        db_ops.finish_run(run_id, "failed", {"error": type(e).__name__, "message": str(e)})
        raise
    db_ops.finish_run(run_id, "completed")


def _record_artifact(run_id: str, kind: str, path: Path, config_hash: str):
    db_ops.add_artifact(run_id, kind, str(path), file_digest(path), config_hash)


def _fresh_dir(directory: Path) -> Path:
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)
    return directory


# Data

def cmd_gen_data(config: RunConfig) -> Path:
    data_dir = config.out / "data"
    config_hash = config.data_hash()
    with ledger_run("gen-data", config, config_hash) as run_id:
        if is_current(data_dir, config_hash):
            logger.info(f"Reusing datasets in {data_dir}")
            return data_dir
        world = generate_domain(config.data, config.seed)
        _fresh_dir(data_dir)
        paths = []
        for name, ds in zip(DATASET_DIRS, world.all()):
            save_dataset(ds, data_dir / name)
            paths.append(data_dir / name)
            _record_artifact(run_id, "dataset", data_dir / name, config_hash)
        write_manifest(data_dir, config_hash, config.seed, paths, {"sizes": {n: len(d) for n, d in
                                                                            zip(DATASET_DIRS, world.all())}})
    return data_dir


def load_world(config: RunConfig) -> GeneratedWorld:
    data_dir = config.out / "data"
    require_current(data_dir, config.data_hash(), "datasets")
    return GeneratedWorld(*(load_dataset(data_dir / name) for name in DATASET_DIRS))


# Evaluation helpers

def detector_detections(model: DetectorModel, ds: Dataset, eval_config: EvalConfig) -> List[List[Detection]]:
    return [flatten(predict(model, item.image, eval_config.score_threshold, eval_config.nms_threshold))
            for item in ds.items]


def wsod_detections(model: WsodModel, fsod5: Optional[DetectorModel], ds: Dataset,
                    eval_config: EvalConfig) -> List[List[Detection]]:
    return [wsod_infer(model, fsod5, item.image, eval_config.weak_available, item.weak) for item in ds.items]


def score_detections(dets: Sequence[Sequence[Detection]], ds: Dataset,
                     eval_config: EvalConfig) -> Tuple[ApResult, ErrorBreakdown]:
    gts = [item.hidden for item in ds.items]
    result = evaluate_detections(dets, gts, ds.num_classes, eval_config.iou_threshold, eval_config.mode)
    breakdown = tide_dataset(dets, gts, eval_config.tide_fg_iou, eval_config.tide_bg_iou,
                             eval_config.score_threshold)
    return result, breakdown


# Warm-up

def cmd_warmup(config: RunConfig) -> List[Path]:
    warm_dir = config.out / "warmup"
    config_hash = config.warmup_hash()
    with ledger_run("warmup", config, config_hash) as run_id:
        if is_current(warm_dir, config_hash):
            logger.info(f"Reusing warm-up checkpoints in {warm_dir}")
            return [warm_dir / f"{tag}.json" for tag in read_manifest(warm_dir)["tags"]]
        world = load_world(config)
        final = WarmupWorkflow(config.warmup).run(world.source, world.target_train,
                                                   background_images(world.backgrounds), config.seed, run_id)
        _fresh_dir(warm_dir)
        paths = []
        history = [dict(h) for h in final["history"]]
        for summary, (tag, model) in zip(history, final["checkpoints"]):
            model.config_hash = config_hash
            path = warm_dir / f"{tag}.json"
            save_detector(model, path)
            result, _ = score_detections(detector_detections(model, world.target_eval, config.eval),
                                         world.target_eval, config.eval)
            summary["map"] = result.mean_ap
            db_ops.add_stage(run_id, tag, "completed", {"map": result.mean_ap, "stage": summary["stage"]})
            _record_artifact(run_id, "detector", path, config_hash)
            paths.append(path)

        csv_path = write_stage_csv(warm_dir / "stages.csv", history, config_hash, config.seed)
        svg_path = stage_map_chart([h["tag"] for h in history], [h["map"] for h in history],
                                   warm_dir / "stages_map.svg")
        tags = [h["tag"] for h in history]
        write_manifest(warm_dir, config_hash, config.seed, paths + [csv_path, svg_path],
                       {"tags": tags, "final": tags[-1]})
    return paths


def load_final_detector(config: RunConfig) -> DetectorModel:
    warm_dir = config.out / "warmup"
    manifest = require_current(warm_dir, config.warmup_hash(), "warm-up checkpoints")
    return load_detector(warm_dir / f"{manifest['final']}.json")


# WSOD

def cmd_train_wsod(config: RunConfig) -> Path:
    wsod_dir = config.out / "wsod" / config.wsod_dir_name()
    config_hash = config.wsod_hash()
    with ledger_run("train-wsod", config, config_hash) as run_id:
        path = wsod_dir / "model.json"
        if is_current(wsod_dir, config_hash):
            logger.info(f"Reusing WSOD model {path}")
            return path
        world = load_world(config)
        needs_detector = config.wsod.use_fe or config.wsod.use_detector_proposals
        fsod5 = load_final_detector(config) if needs_detector else None
        db_ops.add_stage(run_id, "WSOD", "started")
        try:
            model = train_wsod(config.wsod.variant, world.target_train, fsod5, config.wsod, seed=config.seed)
        except PipelineError:
            raise
        except Exception as e:
            logger.error(f"WSOD training crashed: {str(e)}")
            raise StageError("WSOD", f"training crashed: {e}", e) from e
        model.config_hash = config_hash
        _fresh_dir(wsod_dir)
        save_wsod(model, path)
        write_manifest(wsod_dir, config_hash, config.seed, [path],
                       {"variant": model.variant, "use_fe": model.use_fe,
                        "use_detector_proposals": model.use_detector_proposals})
        db_ops.add_stage(run_id, "WSOD", "completed")
        _record_artifact(run_id, "wsod", path, config_hash)
    return path


# Eval

def _default_checkpoint(config: RunConfig, stage: Optional[str]) -> Path:
    if stage:
        return config.out / "warmup" / f"{stage}.json"
    return config.out / "wsod" / config.wsod_dir_name() / "model.json"


def cmd_eval(config: RunConfig, checkpoint: Optional[str] = None,
             stage: Optional[str] = None) -> Tuple[ApResult, ErrorBreakdown]:
    path = Path(checkpoint) if checkpoint else _default_checkpoint(config, stage)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} not found")
    config_hash = sha256_of({"checkpoint": file_digest(path), "data": config.data_hash(),
                             "eval": config.eval.model_dump(mode="json")})
    record = read_json(path)
    name = path.stem if record.get("kind") == "detector" else path.parent.name
    eval_dir = config.out / "eval" / name

    with ledger_run("eval", config, config_hash) as run_id:
        world = load_world(config)
        ds = world.target_eval
        if record.get("kind") == "detector":
            dets = detector_detections(detector_from_record(record), ds, config.eval)
        else:
            model = wsod_from_record(record)
            fsod5 = load_final_detector(config) if model.use_detector_proposals else None
            dets = wsod_detections(model, fsod5, ds, config.eval)
        result, breakdown = score_detections(dets, ds, config.eval)

        _fresh_dir(eval_dir)
        files = [
            write_ap_csv(eval_dir / "ap.csv", result, ds.class_names, config_hash, config.seed),
            write_tide_csv(eval_dir / "tide.csv", breakdown, config_hash, config.seed),
            error_chart(breakdown, eval_dir / "errors.svg", title=f"Error breakdown: {name}"),
        ]
        summary = eval_dir / "summary.json"
        write_json(summary, {"checkpoint": name, "config_hash": config_hash, "seed": config.seed,
                             "ap": result.model_dump(mode="json"), "tide": breakdown.model_dump(mode="json")})
        write_manifest(eval_dir, config_hash, config.seed, files + [summary])
        db_ops.add_metric(run_id, "map", result.mean_ap, {"checkpoint": name, "mode": result.mode})
        for error_type, count in breakdown.model_dump().items():
            db_ops.add_metric(run_id, f"tide_{error_type}", float(count), {"checkpoint": name})
        logger.info(f"{name}: mAP={result.mean_ap:.4f} ({result.mode}), errors={breakdown.errors}")
    return result, breakdown


# Ablation

def check_order_trends(medians: Dict[str, float]) -> List[str]:
    """Human-readable notes for every expected ordering inequality that does not hold."""
    notes = []
    for better, worse in EXPECTED_ORDER_TRENDS:
        if better in medians and worse in medians and medians[better] < medians[worse]:
            notes.append(f"median mAP of {better} ({medians[better]:.4f}) is below {worse} ({medians[worse]:.4f})")
    return notes


def cmd_ablate_order(config: RunConfig) -> Dict[str, float]:
    abl_dir = config.out / "ablation"
    config_hash = config.ablation_hash()
    with ledger_run("ablate-order", config, config_hash) as run_id:
        results: Dict[str, Dict[int, float]] = {order: {} for order in config.ablation.orders}
        for seed in config.ablation.seeds:
            world = generate_domain(config.data, seed)
            for order in config.ablation.orders:
                plan = WarmupPlan.named(order, stage_hyper=config.warmup.plan.stage_hyper)
                warmup = config.warmup.model_copy(update={"plan": plan})
                final = WarmupWorkflow(warmup).run(world.source, world.target_train,
                                                   background_images(world.backgrounds), seed, run_id)
                _, model = final["checkpoints"][-1]
                result, _ = score_detections(detector_detections(model, world.target_eval, config.eval),
                                             world.target_eval, config.eval)
                results[order][seed] = result.mean_ap
                db_ops.add_metric(run_id, "map", result.mean_ap, {"order": order, "seed": seed})
        medians = {order: float(np.median(list(values.values()))) for order, values in results.items()}
        for note in check_order_trends(medians):
            logger.warning(f"Stage-order trend not reproduced: {note}")

        _fresh_dir(abl_dir)
        files = [write_ablation_csv(abl_dir / "orders.csv", results, medians, config_hash, config.seed),
                 ablation_chart(medians, abl_dir / "orders.svg")]
        write_manifest(abl_dir, config_hash, config.seed, files, {"medians": medians})
    return medians


# Report

def _optional_manifest(directory: Path) -> Optional[Dict]:
    try:
        return read_manifest(directory)
    except MissingArtifactError:
        return None


def cmd_report(config: RunConfig) -> Path:
    out = config.out
    context = {"config_hash": config.data_hash(), "seed": config.seed, "output_dir": str(out)}
    data = _optional_manifest(out / "data")
    context["datasets"] = data.get("sizes", {}) if data else {}

    warmup = _optional_manifest(out / "warmup")
    context["stages"] = read_csv(out / "warmup" / "stages.csv") if warmup else []
    context["warmup_hash"] = warmup["config_hash"] if warmup else None

    context["wsod_models"] = []
    for directory in sorted((out / "wsod").glob("*")) if (out / "wsod").exists() else []:
        manifest = _optional_manifest(directory)
        if manifest:
            context["wsod_models"].append({"name": directory.name, **manifest})

    context["evaluations"] = []
    for directory in sorted((out / "eval").glob("*")) if (out / "eval").exists() else []:
        if (directory / "summary.json").exists():
            summary = read_json(directory / "summary.json")
            context["evaluations"].append({"name": directory.name, "map": summary["ap"]["mean_ap"],
                                           "mode": summary["ap"]["mode"], "tide": summary["tide"],
                                           "chart": f"eval/{directory.name}/errors.svg"})

    ablation = _optional_manifest(out / "ablation")
    context["ablation"] = ablation["medians"] if ablation else {}
    context["ablation_notes"] = check_order_trends(context["ablation"])

    if not any([data, warmup, context["wsod_models"], context["evaluations"], ablation]):
        raise MissingArtifactError(f"nothing to report under {out}")

    env = Environment(loader=FileSystemLoader(str(settings.TEMPLATES_DIR)), keep_trailing_newline=True)
    path = out / "report.md"
    path.write_text(env.get_template("report.md.j2").render(**context), encoding="utf-8")
    with ledger_run("report", config, context["config_hash"]) as run_id:
        _record_artifact(run_id, "report", path, context["config_hash"])
    logger.info(f"Report written to {path}")
    return path
