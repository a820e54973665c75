"""Backend contract conformance checks, shared across all implementations.

The same suite runs against the mock (always), the remote client (against a
fake transport in tests, or a live server behind an opt-in flag) and the
subprocess trainer (from that package's own tests). Checks raise
``AssertionError`` with a readable message.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from ..errors import DataValidationError
from ..prompts import MessageSequence
from .base import Backend, HyperParams, JobStatus, status_rank


@dataclass
class ConformanceFixture:
    """Inputs a backend needs to exercise the whole contract.

    ``train_path``/``validation_path`` must be in whatever format the backend
    ingests (JSONL for API-shaped backends, manifest CSV for the trainer).
    """

    train_path: Path
    validation_path: Path
    empty_path: Path
    corrupt_path: Path
    corrupt_line_no: int
    base_model: str
    hp: HyperParams
    categories: tuple[str, ...]
    submitted_ids: tuple[str, ...]
    make_prompt: Callable[[], MessageSequence]
    deterministic_classify: bool = False
    expect_epoch_events: bool = False


def check_upload(backend: Backend, fixture: ConformanceFixture) -> tuple[str, str]:
    handles = backend.upload_training_data(fixture.train_path, fixture.validation_path)
    assert len(handles) == 2 and all(handles), f"bad handles {handles!r}"

    try:
        backend.upload_training_data(fixture.empty_path, fixture.validation_path)
    except DataValidationError:
        pass
    else:
        raise AssertionError("empty training file must be rejected")

    try:
        backend.upload_training_data(fixture.corrupt_path, fixture.validation_path)
    except DataValidationError as exc:
        assert exc.line_no == fixture.corrupt_line_no, (
            f"diagnostic names line {exc.line_no}, corrupted line is {fixture.corrupt_line_no}"
        )
    else:
        raise AssertionError("corrupted training file must be rejected")
    return handles


def check_job_lifecycle(backend: Backend, fixture: ConformanceFixture, handles: tuple[str, str],
                        poll_interval_s: float = 0.0):
    import time

    job = backend.create_finetune(
        fixture.base_model, handles, fixture.hp, idempotency_key="conformance-job"
    )
    seen = [job.status]
    while not seen[-1].terminal:
        if poll_interval_s:
            time.sleep(poll_interval_s)
        snapshot = backend.poll_job(job.job_id)
        assert status_rank(snapshot.status) >= status_rank(seen[-1]), (
            f"lifecycle moved backwards: {seen[-1]} -> {snapshot.status}"
        )
        seen.append(snapshot.status)
    final = backend.poll_job(job.job_id)
    assert final.status.terminal
    assert final.duration_s >= 0 and final.cost_usd >= 0, "cost/duration must be non-negative"
    if final.status is JobStatus.SUCCEEDED:
        assert final.output_model, "succeeded job must name its output model"
        flagged_ids = {sid for sid, _ in final.flagged_samples}
        assert flagged_ids <= set(fixture.submitted_ids), (
            f"flagged ids {flagged_ids - set(fixture.submitted_ids)} were never submitted"
        )
        if final.trained_samples is not None:
            assert final.trained_samples == len(fixture.submitted_ids) - len(final.flagged_samples), (
                "trained count must equal submitted minus flagged"
            )
    if fixture.expect_epoch_events and final.status is JobStatus.SUCCEEDED:
        reports = backend.get_epoch_reports(job.job_id)
        assert len(reports) == fixture.hp.epochs, (
            f"expected {fixture.hp.epochs} epoch events, saw {len(reports)}"
        )
        for i, event in enumerate(reports):
            assert event.get("epoch") == i, f"epoch events out of order: {reports}"

    # Retried submission with the same idempotency key must not create a new job.
    retry = backend.create_finetune(
        fixture.base_model, handles, fixture.hp, idempotency_key="conformance-job"
    )
    assert retry.job_id == job.job_id, "idempotent retry created a duplicate job"
    return final


def check_classify(backend: Backend, fixture: ConformanceFixture, model_id: str) -> None:
    prompt = fixture.make_prompt()
    first = backend.classify(model_id, prompt, fixture.categories)
    assert first.latency_s >= 0 and first.cost_usd >= 0
    assert first.parsed_category is None or first.parsed_category in fixture.categories
    if fixture.deterministic_classify:
        again = backend.classify(model_id, prompt, fixture.categories)
        assert (again.raw_text, again.parsed_category) == (first.raw_text, first.parsed_category), (
            "repeated classify with identical input must return identical results"
        )


def run_conformance(backend: Backend, fixture: ConformanceFixture, poll_interval_s: float = 0.0):
    """Full suite; returns the terminal job for extra backend-specific checks."""
    handles = check_upload(backend, fixture)
    final = check_job_lifecycle(backend, fixture, handles, poll_interval_s)
    model = final.output_model if final.status is JobStatus.SUCCEEDED else fixture.base_model
    check_classify(backend, fixture, model)
    return final
