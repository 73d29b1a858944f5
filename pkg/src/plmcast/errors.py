"""Exception hierarchy for plmcast.

Every error carries a ``context`` dict so the CLI can emit a machine-readable
record instead of a bare traceback.
"""

from __future__ import annotations

from typing import Any


class PlmcastError(Exception):
    """Base class for all plmcast failures."""

    kind = "error"

    def __init__(self, message: str, **context: Any):
        self.message = message
        self.context = context
        super().__init__(message)

    def to_record(self) -> dict[str, Any]:
        return {"error": self.kind, "message": self.message, **self.context}


class ConfigError(PlmcastError):
    """Raised when a run configuration is invalid or self-contradictory."""

    kind = "config_error"

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems), problems=problems)


class IngestionError(PlmcastError):
    kind = "ingestion_error"


class SplitError(PlmcastError):
    kind = "split_error"


class WindowError(PlmcastError):
    kind = "window_error"


class DescriptionError(PlmcastError):
    kind = "description_error"


class BackboneLoadError(PlmcastError):
    kind = "backbone_load_error"


class FreezePolicyError(PlmcastError):
    kind = "freeze_policy_error"


class ShapeError(PlmcastError):
    kind = "shape_error"


class NumericalError(PlmcastError):
    kind = "numerical_error"


class TrainingDivergedError(PlmcastError):
    """Raised when the training loss stops being finite."""

    kind = "training_diverged"

    def __init__(self, epoch: int, batch: int, components: dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.components = components
        super().__init__(
            f"Non-finite loss at epoch {epoch}, batch {batch}: {components}",
            epoch=epoch,
            batch=batch,
            components=components,
        )


class CheckpointError(PlmcastError):
    kind = "checkpoint_error"


class AnalysisError(PlmcastError):
    kind = "analysis_error"
