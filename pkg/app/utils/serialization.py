"""Canonical JSON and exact float64 array encoding for checkpoints and reports."""
import base64
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from app.errors import MissingArtifactError


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    data = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    return {"shape": list(data.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_array(record: Dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(record["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(record["shape"])


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def write_json(path: Union[str, Path], payload: Any):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(payload) + "\n", encoding="utf-8")


def read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def sha256_of(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def file_digest(path: Union[str, Path]) -> str:
    """sha256 of a file, or of every file under a directory in sorted relative-path order."""
    path = Path(path)
    digest = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        if path.is_dir():
            digest.update(f.relative_to(path).as_posix().encode("utf-8"))
        digest.update(f.read_bytes())
    return digest.hexdigest()
