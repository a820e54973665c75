"""Pluggable fine-tune/predict backends sharing one contract."""

from .base import Backend, ClassifyResult, FineTuneJob, HyperParams, JobStatus, PriceTable
from .mock import MockBackend
from .remote import RemoteBackend
from .subproc import SubprocessBackend

__all__ = [
    "Backend",
    "ClassifyResult",
    "FineTuneJob",
    "HyperParams",
    "JobStatus",
    "PriceTable",
    "MockBackend",
    "RemoteBackend",
    "SubprocessBackend",
]
