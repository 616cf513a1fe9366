"""On-disk dataset format.

One directory per dataset:

    <dir>/annotations.jsonl   header record on line 1, one record per image after it
    <dir>/images/<name>.png   lossless RGB images

Records are canonical JSON (sorted keys, no whitespace) so files diff cleanly
and two saves of equal datasets are byte-identical.
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.core.geom import BoundingBox
from app.datamodel.types import (
    Dataset, DatasetItem, DomainTag, FullAnnotation, Instance, SceneSpec, WeakAnnotation,
)
from app.errors import DatasetParseError, DatasetValidationError, InvalidBoxError, PreconditionError
from app.utils.logger import logger

SCHEMA_VERSION = 1
ANNOTATION_FILE = "annotations.jsonl"
IMAGE_DIR = "images"


class InstanceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    box: Tuple[float, float, float, float]
    class_id: int = Field(ge=1)


class SceneRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    placements: List[InstanceRecord]
    background_id: int = 0
    render_seed: int = 0


class HeaderRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    domain_tag: DomainTag
    class_names: List[str]
    height: int = Field(gt=0)
    width: int = Field(gt=0)
    count: int = Field(ge=0)
    style: Optional[Dict[str, Any]] = None


class ItemRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    file: str
    full: Optional[List[InstanceRecord]] = None
    weak: Optional[List[int]] = None
    hidden: Optional[List[InstanceRecord]] = None
    scene: Optional[SceneRecord] = None


def _dump(record: BaseModel) -> str:
    return json.dumps(record.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _instances_to_records(ann: Optional[FullAnnotation]) -> Optional[List[InstanceRecord]]:
    if ann is None:
        return None
    return [InstanceRecord(box=inst.box.as_tuple(), class_id=inst.class_id) for inst in ann.instances]


def _records_to_instances(records: List[InstanceRecord]) -> Tuple[Instance, ...]:
    return tuple(Instance(BoundingBox.from_array(r.box), r.class_id) for r in records)


def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    root = Path(path)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    header = HeaderRecord(
        schema_version=SCHEMA_VERSION,
        domain_tag=ds.domain_tag,
        class_names=list(ds.class_names),
        height=ds.height,
        width=ds.width,
        count=len(ds.items),
        style=dict(ds.style) if ds.style is not None else None,
    )
    lines = [_dump(header)]
    for item in ds.items:
        file_name = f"{IMAGE_DIR}/{item.name}.png"
        Image.fromarray(np.ascontiguousarray(item.image), mode="RGB").save(root / file_name, format="PNG")
        scene = None
        if item.scene is not None:
            scene = SceneRecord(
                placements=_instances_to_records(item.scene.annotation()),
                background_id=item.scene.background_id,
                render_seed=item.scene.render_seed,
            )
        record = ItemRecord(
            file=file_name,
            full=_instances_to_records(item.full),
            weak=list(item.weak.present) if item.weak is not None else None,
            hidden=_instances_to_records(item.hidden),
            scene=scene,
        )
        lines.append(_dump(record))
    (root / ANNOTATION_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug(f"Saved dataset {ds.domain_tag.value} ({len(ds.items)} items) to {root}")


def _parse_line(model, line: str, line_no: int):
    try:
        return model.model_validate_json(line)
    except ValidationError as e:
        raise DatasetParseError(line_no, str(e).splitlines()[0] if str(e) else "invalid record") from e


def load_dataset(path: Union[str, Path]) -> Dataset:
    root = Path(path)
    ann_path = root / ANNOTATION_FILE
    if not ann_path.exists():
        raise DatasetParseError(0, f"missing {ann_path}")
    lines = ann_path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetParseError(1, "empty annotation file")
    header = _parse_line(HeaderRecord, lines[0], 1)
    if header.schema_version != SCHEMA_VERSION:
        raise DatasetParseError(1, f"unsupported schema version {header.schema_version}")

    items: List[DatasetItem] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        record = _parse_line(ItemRecord, line, line_no)
        try:
            full = FullAnnotation(_records_to_instances(record.full)) if record.full is not None else None
            hidden = FullAnnotation(_records_to_instances(record.hidden)) if record.hidden is not None else None
            scene = None
            if record.scene is not None:
                scene = SceneSpec(_records_to_instances(record.scene.placements),
                                  record.scene.background_id, record.scene.render_seed)
        except InvalidBoxError as e:
            raise DatasetValidationError(f"line {line_no}: {e}") from e
        try:
            weak = WeakAnnotation(tuple(record.weak)) if record.weak is not None else None
        except PreconditionError as e:
            raise DatasetParseError(line_no, str(e)) from e
        image_path = root / record.file
        if not image_path.exists():
            raise DatasetParseError(line_no, f"missing image {record.file}")
        with Image.open(image_path) as img:
            image = np.array(img.convert("RGB"), dtype=np.uint8)
        try:
            items.append(DatasetItem(Path(record.file).stem, image, full, weak, hidden, scene))
        except DatasetValidationError as e:
            raise DatasetValidationError(f"line {line_no}: {e}") from e

    if len(items) != header.count:
        raise DatasetParseError(1, f"header declares {header.count} items, found {len(items)}")
    return Dataset(header.domain_tag, tuple(header.class_names), header.height, header.width,
                   tuple(items), header.style)
