from typing import Any, Dict, List, Optional, Tuple, TypedDict

import numpy as np

from app.datamodel.types import Dataset
from app.detector.model import DetectorModel


class WarmupState(TypedDict):
    # Run info
    run_id: str
    seed: int

    # Inputs
    source: Dataset
    target_train: Dataset
    backgrounds: List[np.ndarray]

    # Derived datasets, built on first use
    g1: Optional[Dataset]
    g2: Optional[Dataset]

    # Progress
    model: Optional[DetectorModel]
    checkpoints: List[Tuple[str, DetectorModel]]
    pl_round: int
    current_stage: str

    # Per-stage summaries (images used, dropped, lr, ...)
    history: List[Dict[str, Any]]
