"""Exception hierarchy shared across the harness."""

from __future__ import annotations


class LeafbenchError(Exception):
    """Base class for all harness errors."""


class DatasetError(LeafbenchError):
    """Corpus scanning, balancing or splitting failed."""


class ClassShortageError(DatasetError):
    """A class has fewer samples than the requested per-class count."""

    def __init__(self, label: str, have: int, want: int):
        super().__init__(f"class {label!r} has {have} samples, need {want}")
        self.label = label
        self.have = have
        self.want = want


class PromptError(LeafbenchError):
    """Prompt rendering or response parsing failed."""


class ResponseParseError(PromptError):
    """A model response could not be reduced to a category.

    Subclasses are recorded as failed predictions, never raised out of a
    prediction sweep.
    """


class NoJsonFound(ResponseParseError):
    pass


class MissingCategoryKey(ResponseParseError):
    pass


class UnknownCategory(ResponseParseError):
    pass


class BackendError(LeafbenchError):
    """A backend rejected a request or failed permanently."""


class TransportError(BackendError):
    """Network / subprocess transport failure; retryable."""


class DataValidationError(BackendError):
    """An uploaded training file failed eager validation."""

    def __init__(self, path, line_no: int | None, reason: str):
        loc = f"{path}:{line_no}" if line_no is not None else str(path)
        super().__init__(f"{loc}: {reason}")
        self.path = path
        self.line_no = line_no


class StudyError(LeafbenchError):
    """An optimization study produced no usable trial."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history


class SchedulerError(LeafbenchError):
    """Experiment orchestration failed."""


class ReportError(LeafbenchError):
    """Nothing to report, or a report destination is unusable."""
