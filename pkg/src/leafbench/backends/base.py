"""The backend contract: upload, fine-tune, poll, classify."""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from ..prompts import MessageSequence


@dataclass(frozen=True)
class HyperParams:
    epochs: int
    batch_size: int
    learning_rate: float | None = None  # remote backends may manage it

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class JobStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in (JobStatus.SUCCEEDED, JobStatus.FAILED)


# Lifecycle must only ever move forward through this order.
_STATUS_ORDER = {JobStatus.PENDING: 0, JobStatus.RUNNING: 1, JobStatus.SUCCEEDED: 2, JobStatus.FAILED: 2}


def status_rank(status: JobStatus) -> int:
    return _STATUS_ORDER[status]


@dataclass(frozen=True)
class FineTuneJob:
    job_id: str
    base_model: str
    status: JobStatus
    output_model: str | None = None
    train_loss: float | None = None
    full_validation_loss: float | None = None
    trained_tokens: int | None = None
    trained_samples: int | None = None
    duration_s: float = 0.0
    cost_usd: float = 0.0
    flagged_samples: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.status is JobStatus.SUCCEEDED and not self.output_model:
            raise ValueError("succeeded job must name an output model")


@dataclass(frozen=True)
class ClassifyResult:
    raw_text: str
    parsed_category: str | None
    latency_s: float
    cost_usd: float

    def __post_init__(self):
        if self.latency_s < 0 or self.cost_usd < 0:
            raise ValueError("latency and cost must be non-negative")


@dataclass(frozen=True)
class PriceTable:
    """Per-1k-token prices; backends compute dollar costs from these only."""

    train_per_1k: float = 0.025
    input_per_1k: float = 0.0025
    output_per_1k: float = 0.01

    def training_cost(self, trained_tokens: int) -> float:
        return round(trained_tokens / 1000.0 * self.train_per_1k, 6)

    def prediction_cost(self, input_tokens: int, output_tokens: int) -> float:
        return round(
            input_tokens / 1000.0 * self.input_per_1k + output_tokens / 1000.0 * self.output_per_1k,
            8,
        )


class Backend(abc.ABC):
    """Uniform fine-tune/predict surface.

    Implementations must be safe for concurrent ``classify`` calls and for
    polling distinct jobs concurrently.
    """

    name: str = "backend"

    @abc.abstractmethod
    def upload_training_data(self, train: Path | str, validation: Path | str) -> tuple[str, str]:
        """Eagerly validate and register both files; returns opaque handles."""

    @abc.abstractmethod
    def create_finetune(
        self,
        base_model: str,
        handles: tuple[str, str],
        hp: HyperParams,
        idempotency_key: str | None = None,
    ) -> FineTuneJob:
        """Register a fine-tune job (initially pending).

        Re-submitting with a previously seen idempotency key returns the
        existing job instead of creating (and charging for) a new one.
        """

    @abc.abstractmethod
    def poll_job(self, job_id: str) -> FineTuneJob:
        """Current job snapshot; terminal snapshots carry losses, cost, flags."""

    @abc.abstractmethod
    def classify(
        self,
        model_id: str,
        prompt: MessageSequence,
        categories: Sequence[str],
        strict: bool = False,
    ) -> ClassifyResult:
        """One prediction. Parse failures are results, not errors."""

    def wait_for_job(self, job_id: str, poll_interval_s: float = 0.0) -> FineTuneJob:
        """Poll until the job is terminal."""
        import time

        while True:
            job = self.poll_job(job_id)
            if job.status.terminal:
                return job
            if poll_interval_s:
                time.sleep(poll_interval_s)
