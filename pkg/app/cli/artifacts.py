"""Artifact manifests: which config hash produced a directory, and the digest of every file in it."""
from pathlib import Path
from typing import Dict, Iterable, Optional

from app.errors import MissingArtifactError, StaleArtifactError
from app.utils.logger import logger
from app.utils.serialization import file_digest, read_json, write_json

MANIFEST = "manifest.json"


def write_manifest(directory: Path, config_hash: str, seed: int, files: Iterable[Path],
                   extra: Optional[Dict] = None) -> Path:
    directory = Path(directory)
    digests = {Path(f).relative_to(directory).as_posix(): file_digest(f) for f in sorted(files)}
    payload = {"config_hash": config_hash, "seed": seed, "files": digests, **(extra or {})}
    path = directory / MANIFEST
    write_json(path, payload)
    return path


def read_manifest(directory: Path) -> Dict:
    return read_json(Path(directory) / MANIFEST)


def is_current(directory: Path, config_hash: str) -> bool:
    """True when the directory was produced by config_hash and no file changed since."""
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        return False
    manifest = read_manifest(directory)
    if manifest.get("config_hash") != config_hash:
        logger.info(f"{directory} was produced by another configuration; regenerating")
        return False
    for rel, digest in manifest.get("files", {}).items():
        target = directory / rel
        if not target.exists() or file_digest(target) != digest:
            logger.warning(f"{target} no longer matches its manifest; regenerating")
            return False
    return True


def require_current(directory: Path, config_hash: str, what: str) -> Dict:
    """Manifest of an upstream artifact, verified against the hash the caller expects."""
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        raise MissingArtifactError(f"{what} not found under {directory}; run the producing command first")
    manifest = read_manifest(directory)
    if manifest.get("config_hash") != config_hash:
        raise StaleArtifactError(f"{what} under {directory} was produced by config "
                                 f"{manifest.get('config_hash', '?')[:12]}, expected {config_hash[:12]}")
    for rel, digest in manifest.get("files", {}).items():
        target = directory / rel
        if not target.exists():
            raise MissingArtifactError(f"{target} listed in the manifest is missing")
        if file_digest(target) != digest:
            raise StaleArtifactError(f"{target} changed after it was recorded")
    return manifest
