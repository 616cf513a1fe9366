"""Exception hierarchy shared by the pipeline.

Every error carries the process exit code the CLI reports for it.
"""
from typing import Optional


class PipelineError(Exception):
    exit_code = 1
    kind = "pipeline_error"

    def to_record(self) -> dict:
        return {"error": self.kind, "message": str(self), "exit_code": self.exit_code}


class PreconditionError(PipelineError, ValueError):
    kind = "precondition_violation"


class InvalidBoxError(PreconditionError):
    kind = "invalid_box"


class DegenerateBoxError(PreconditionError):
    kind = "degenerate_box"


class UnsortedDetectionsError(PreconditionError):
    kind = "unsorted_detections"


class StyleError(PreconditionError):
    kind = "invalid_style"


class DatasetParseError(PipelineError):
    kind = "dataset_parse_error"

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DatasetValidationError(PipelineError, ValueError):
    kind = "dataset_validation_error"


class EmptyDatasetError(PipelineError):
    kind = "empty_dataset"


class MissingSceneError(PipelineError):
    kind = "missing_scene"


class ProposalError(PipelineError):
    kind = "no_proposals"


class NoUsableImagesError(PipelineError):
    kind = "no_usable_images"


class NoDefinedClassesError(PipelineError):
    kind = "no_defined_classes"


class ConfigError(PipelineError):
    exit_code = 2
    kind = "schema_violation"


class MissingArtifactError(PipelineError):
    exit_code = 3
    kind = "missing_artifact"


class StageError(PipelineError):
    exit_code = 4
    kind = "stage_failure"

    def __init__(self, stage: str, message: str, cause: Optional[BaseException] = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.cause = cause

    def to_record(self) -> dict:
        record = super().to_record()
        record["stage"] = self.stage
        return record


class StaleArtifactError(PipelineError):
    exit_code = 5
    kind = "stale_artifact"


class InternalError(PipelineError):
    """Wraps an unexpected exception so the CLI still reports a structured record."""
    exit_code = 6
    kind = "internal"

    def __init__(self, cause: BaseException):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.cause = cause
