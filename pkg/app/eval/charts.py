"""SVG charts: per-stage mAP curves and error breakdown bars.

Output is byte-stable: the SVG id salt is fixed and no date is embedded.
"""
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from app.eval.tide import ERROR_TYPES, ErrorBreakdown
from app.utils.logger import logger

plt.rcParams["svg.hashsalt"] = "dual-domain-wsod"


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
        logger.debug(f"Generated chart: {path.name}")
    except Exception as e:
        logger.error(f"Error generating chart {path.name}: {str(e)}")
        raise
    finally:
        plt.close(fig)
    return path


def stage_map_chart(tags: Sequence[str], values: Sequence[float], path: Union[str, Path],
                    title: str = "mAP per warm-up stage") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(tags)), [100.0 * v for v in values], marker="o", color="tab:blue")
    ax.set_xticks(range(len(tags)))
    ax.set_xticklabels(tags)
    ax.set_ylabel("mAP (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def error_chart(breakdown: ErrorBreakdown, path: Union[str, Path], title: str = "Error breakdown") -> Path:
    shares = breakdown.percentages()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(ERROR_TYPES)), [shares[name] for name in ERROR_TYPES], color="tab:orange")
    ax.set_xticks(range(len(ERROR_TYPES)))
    ax.set_xticklabels([name[:5] for name in ERROR_TYPES])
    ax.set_ylabel("share of errors (%)")
    ax.set_title(title)
    return _save(fig, path)


def ablation_chart(medians: dict, path: Union[str, Path], title: str = "Median mAP per stage order") -> Path:
    names = list(medians)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.barh(range(len(names)), [100.0 * medians[n] for n in names], color="tab:green")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xlabel("mAP (%)")
    ax.set_title(title)
    return _save(fig, path)
