from .types import (
    Dataset, DatasetItem, Detection, DomainTag, FullAnnotation, Instance, SceneSpec,
    WeakAnnotation, FULLY_ANNOTATED_TAGS, check_class_id, class_names_for, structurally_equal,
    weak_from_full,
)
from .storage import load_dataset, save_dataset, SCHEMA_VERSION
