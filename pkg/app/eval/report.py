"""CSV reports. Every row carries the config hash and seed that produced it."""
import csv
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

from app.eval.ap import ApResult
from app.eval.tide import ERROR_TYPES, ErrorBreakdown

PathLike = Union[str, Path]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence], config_hash: str, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header) + ["config_hash", "seed"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row] + [config_hash, seed])
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_ap_csv(path: PathLike, result: ApResult, class_names: Sequence[str], config_hash: str, seed: int) -> Path:
    rows = [(c, class_names[c - 1], result.per_class[c]) for c in sorted(result.per_class)]
    rows.append(("mAP", result.mode, result.mean_ap))
    return write_csv(path, ["class_id", "class_name", "ap"], rows, config_hash, seed)


def write_tide_csv(path: PathLike, breakdown: ErrorBreakdown, config_hash: str, seed: int) -> Path:
    shares = breakdown.percentages()
    rows = [("correct", breakdown.correct, None)]
    rows += [(name, getattr(breakdown, name), shares[name]) for name in ERROR_TYPES]
    return write_csv(path, ["category", "count", "percent_of_errors"], rows, config_hash, seed)


def write_stage_csv(path: PathLike, stages: Sequence[Dict], config_hash: str, seed: int) -> Path:
    rows = [(s["tag"], s["stage"], s["dataset"], s["images"], s.get("map")) for s in stages]
    return write_csv(path, ["tag", "stage", "dataset", "images", "map"], rows, config_hash, seed)


def write_ablation_csv(path: PathLike, results: Dict[str, Dict[int, float]], medians: Dict[str, float],
                       config_hash: str, seed: int) -> Path:
    rows = []
    for order in results:
        for run_seed, value in sorted(results[order].items()):
            rows.append((order, run_seed, value))
        rows.append((order, "median", medians[order]))
    return write_csv(path, ["order", "run_seed", "map"], rows, config_hash, seed)
