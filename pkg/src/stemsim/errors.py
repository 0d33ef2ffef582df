"""Exception types shared across the pipeline."""


class StemsimError(Exception):
    """Base class for all package errors."""


class ParameterError(StemsimError, ValueError):
    """An argument is outside its documented range."""


class ShapeError(StemsimError, ValueError):
    """Array shapes are inconsistent with the configured model or mask."""


class IngestionError(StemsimError):
    """An audio file could not be read during dataset ingestion."""


class EmptyDatasetError(StemsimError):
    """No usable pieces were found."""


class EmptyMixError(StemsimError):
    """A mix was requested for a piece with no non-silent stems."""


class ConstraintError(StemsimError):
    """A pseudo-mix constraint (tempo group, donor count) is violated."""


class MissingStemError(StemsimError):
    """The requested focus stem is absent from the piece."""


class SamplingExhaustedError(StemsimError):
    """The corpus contains no source pattern matching the triplet request."""


class ConflictError(StemsimError):
    """Interchanging positive/negative would contradict the label vectors."""


class ProvenanceError(StemsimError):
    """A segment reference cannot be resolved back to stem audio."""


class DatasetError(StemsimError):
    """The dataset split cannot support the requested training stage."""


class DependencyError(StemsimError):
    """A required upstream artifact (checkpoint, corpus) is missing."""


class TrainingDivergedError(StemsimError):
    """A non-finite loss was produced; carries batch diagnostics."""

    def __init__(self, message: str, epoch: int, step: int, triplet_ids: list):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.triplet_ids = triplet_ids


class EvaluationError(StemsimError):
    """The evaluation protocol cannot run on the given store."""


class ExportError(StemsimError):
    """Stimulus or visualization export failed."""


class ConfigError(StemsimError):
    """A configuration file or override contains unknown or invalid keys."""
