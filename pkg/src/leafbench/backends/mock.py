"""Deterministic in-memory backend for tests and dry runs.

Everything derives from (seed, model lineage, input): the base model answers
correctly with probability ``base_accuracy``, and every fine-tune generation
multiplies the error rate by ``error_retention``. Lineage depth is encoded in
the model id itself (``ft<depth>-<hash>``) so determinism survives process
restarts. A configurable predicate over sample ids simulates the provider's
moderation pass; flagged samples are excluded from training and reported on
the job.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from ..errors import BackendError, DataValidationError
from ..prompts import MessageSequence, completion_text, parse_category_response
from ..rng import hash_float, hash_hex
from .base import Backend, ClassifyResult, FineTuneJob, HyperParams, JobStatus, PriceTable

FLAG_REASON = "moderation: human-like content detected"

_FT_PREFIX = "ft"


def _parse_model_head(model_id: str) -> tuple[int, int]:
    """(lineage depth, hyperparameter quality 0-100) encoded in the model id.

    Fine-tuned ids look like ``ft<depth>q<quality>-<hash>``; anything else is
    a base model (depth 0, neutral quality). Encoding lineage in the id keeps
    the mock deterministic across process restarts.
    """
    head = model_id.split("-", 1)[0]
    if not head.startswith(_FT_PREFIX):
        return 0, 100
    body = head[len(_FT_PREFIX):]
    depth_digits, _, quality_digits = body.partition("q")
    if not depth_digits.isdigit():
        return 0, 100
    quality = int(quality_digits) if quality_digits.isdigit() else 100
    return int(depth_digits), quality


def model_depth(model_id: str) -> int:
    """Fine-tune generation count encoded in the id; base models are depth 0."""
    return _parse_model_head(model_id)[0]


def hp_quality(hp: HyperParams) -> int:
    """0-100 score of how close a configuration is to the mock's sweet spot.

    The sweet spot is 10 epochs, batch 16, learning rate 10^-3.5; distance in
    each dimension is normalized to [0, 1] and averaged. A missing learning
    rate (remote-managed) contributes nothing.
    """
    import math

    terms = [min(1.0, abs(hp.epochs - 10) / 7.0), 0.0 if hp.batch_size == 16 else 1.0]
    if hp.learning_rate is not None:
        terms.append(min(1.0, abs(math.log10(hp.learning_rate) + 3.5) / 1.5))
    return round(100 * (1.0 - sum(terms) / len(terms)))


def sample_key_from_url(url: str) -> str:
    """``<label>/<stem>`` of an image URL; matches manifest sample ids."""
    parts = url.rstrip("/").split("/")
    stem = parts[-1].rsplit(".", 1)[0]
    return f"{parts[-2]}/{stem}" if len(parts) >= 2 else stem


@dataclass
class _MockJob:
    job: FineTuneJob
    polls: int = 0


class MockBackend(Backend):
    name = "mock"

    def __init__(
        self,
        seed: int = 0,
        base_accuracy: float = 0.55,
        error_retention: float = 0.1,
        flag_predicate: Callable[[str], bool] | None = None,
        malformed_rate: float = 0.0,
        prices: PriceTable = PriceTable(),
        fail_idempotency_keys: frozenset[str] = frozenset(),
        hp_penalty: float = 0.0,
    ):
        self.seed = seed
        self.base_accuracy = base_accuracy
        self.error_retention = error_retention
        self.flag_predicate = flag_predicate
        self.malformed_rate = malformed_rate
        self.prices = prices
        self.fail_idempotency_keys = fail_idempotency_keys
        self.hp_penalty = hp_penalty
        self._lock = threading.Lock()
        self._files: dict[str, list[dict]] = {}
        self._jobs: dict[str, _MockJob] = {}
        self._idempotency: dict[str, str] = {}
        self.create_calls: list[dict] = []  # call log inspected by the conformance suite

    # -- helpers -----------------------------------------------------------

    def accuracy_of(self, model_id: str) -> float:
        depth, quality = _parse_model_head(model_id)
        accuracy = 1.0 - (1.0 - self.base_accuracy) * self.error_retention**depth
        if depth > 0:
            accuracy -= self.hp_penalty * (1.0 - quality / 100.0)
        return max(0.0, min(1.0, accuracy))

    @staticmethod
    def _record_urls(record: dict) -> list[str]:
        urls = []
        for message in record.get("messages", []):
            content = message.get("content")
            if isinstance(content, list):
                for part in content:
                    if isinstance(part, dict) and part.get("type") == "image_url":
                        urls.append(part["image_url"]["url"])
        return urls

    def _estimate_tokens(self, record: dict) -> int:
        text = sum(
            len(m["content"]) for m in record["messages"] if isinstance(m.get("content"), str)
        )
        return text // 4 + 85 * len(self._record_urls(record))

    # -- contract ----------------------------------------------------------

    def upload_training_data(self, train: Path | str, validation: Path | str) -> tuple[str, str]:
        return self._upload_one(train), self._upload_one(validation)

    def _upload_one(self, path: Path | str) -> str:
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataValidationError(path, None, str(exc)) from exc
        if not lines:
            raise DataValidationError(path, None, "file is empty")
        records = []
        for line_no, line in enumerate(lines, start=1):
            try:
                record = json.loads(line)
            except ValueError as exc:
                raise DataValidationError(path, line_no, f"invalid JSON: {exc}") from exc
            if not isinstance(record, dict) or "messages" not in record:
                raise DataValidationError(path, line_no, "record has no 'messages' key")
            records.append(record)
        handle = f"file-{hash_hex(self.seed, path.name, len(records), length=12)}"
        with self._lock:
            self._files[handle] = records
        return handle

    def create_finetune(
        self,
        base_model: str,
        handles: tuple[str, str],
        hp: HyperParams,
        idempotency_key: str | None = None,
    ) -> FineTuneJob:
        train_handle, val_handle = handles
        with self._lock:
            if idempotency_key and idempotency_key in self._idempotency:
                return self._jobs[self._idempotency[idempotency_key]].job
            if train_handle not in self._files or val_handle not in self._files:
                raise BackendError(f"unknown data handle in {handles}")
            # id derives from the request alone so resumed runs recreate the
            # same job (and therefore the same output model) deterministically
            job_id = "ftjob-" + hash_hex(
                self.seed, base_model, train_handle, val_handle,
                hp.epochs, hp.batch_size, hp.learning_rate, idempotency_key, length=10,
            )
            if job_id in self._jobs:
                return self._jobs[job_id].job
            job = FineTuneJob(job_id=job_id, base_model=base_model, status=JobStatus.PENDING)
            self._jobs[job_id] = _MockJob(job=job)
            self.create_calls.append(
                {"job_id": job_id, "base_model": base_model, "handles": handles,
                 "hp": hp, "idempotency_key": idempotency_key}
            )
            if idempotency_key:
                self._idempotency[idempotency_key] = job_id
        return job

    def poll_job(self, job_id: str) -> FineTuneJob:
        with self._lock:
            entry = self._jobs.get(job_id)
            if entry is None:
                raise BackendError(f"unknown job {job_id}")
            if entry.job.status.terminal:
                return entry.job
            entry.polls += 1
            if entry.polls == 1:
                entry.job = FineTuneJob(
                    job_id=job_id, base_model=entry.job.base_model, status=JobStatus.RUNNING
                )
            else:
                entry.job = self._finish(entry)
            return entry.job

    def _finish(self, entry: _MockJob) -> FineTuneJob:
        job = entry.job
        call = next(c for c in self.create_calls if c["job_id"] == job.job_id)
        if call["idempotency_key"] in self.fail_idempotency_keys:
            return FineTuneJob(job_id=job.job_id, base_model=job.base_model, status=JobStatus.FAILED)
        records = self._files[call["handles"][0]]
        flagged = []
        kept_tokens = 0
        for record in records:
            urls = self._record_urls(record)
            sample_id = sample_key_from_url(urls[0]) if urls else ""
            if self.flag_predicate and self.flag_predicate(sample_id):
                flagged.append((sample_id, FLAG_REASON))
            else:
                kept_tokens += self._estimate_tokens(record)
        hp: HyperParams = call["hp"]
        trained_tokens = kept_tokens * hp.epochs
        depth = model_depth(job.base_model) + 1
        output_model = (
            f"{_FT_PREFIX}{depth}q{hp_quality(hp)}-{hash_hex(self.seed, job.job_id, 'model', length=8)}"
        )
        jitter = hash_float(self.seed, job.job_id, "loss")
        return FineTuneJob(
            job_id=job.job_id,
            base_model=job.base_model,
            status=JobStatus.SUCCEEDED,
            output_model=output_model,
            train_loss=round(0.01 * (0.25 ** (depth - 1)) * (0.5 + jitter), 6),
            full_validation_loss=round(0.15 * (0.5 ** (depth - 1)) * (0.5 + jitter), 6),
            trained_tokens=trained_tokens,
            trained_samples=len(records) - len(flagged),
            duration_s=round(1500.0 + 700.0 * hash_float(self.seed, job.job_id, "dur"), 1),
            cost_usd=self.prices.training_cost(trained_tokens),
            flagged_samples=tuple(flagged),
        )

    def classify(
        self,
        model_id: str,
        prompt: MessageSequence,
        categories: Sequence[str],
        strict: bool = False,
    ) -> ClassifyResult:
        urls = prompt.image_urls()
        if not urls:
            raise BackendError("prompt carries no image")
        url = urls[0]
        true_label = next((seg for seg in reversed(url.split("/")) if seg in categories), None)
        if hash_float(self.seed, "malformed", model_id, url) < self.malformed_rate:
            raw = "I am unable to determine the condition of this leaf."
        else:
            correct = hash_float(self.seed, "classify", model_id, url) < self.accuracy_of(model_id)
            if correct and true_label is not None:
                answer = true_label
            else:
                others = [c for c in categories if c != true_label]
                answer = others[int(hash_float(self.seed, "wrong", model_id, url) * len(others))]
            raw = completion_text(answer)
        try:
            parsed = parse_category_response(raw, categories, strict=strict)
        except Exception:
            parsed = None
        input_tokens = len(prompt.text()) // 4 + 85
        return ClassifyResult(
            raw_text=raw,
            parsed_category=parsed,
            latency_s=round(3.4 + 0.4 * hash_float(self.seed, "latency", model_id, url), 4),
            cost_usd=self.prices.prediction_cost(input_tokens, 12),
        )
