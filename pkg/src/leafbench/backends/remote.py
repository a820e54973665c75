"""OpenAI-compatible REST backend: file upload, fine-tune jobs, chat completions.

The wire surface is the standard one (``/files``, ``/fine_tuning/jobs``,
``/chat/completions``) so any compatible server works; the base URL comes
from configuration and the bearer token from ``LEAFBENCH_API_KEY``. Dollar
costs are computed from the configured price table, never hardcoded.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path
from typing import Sequence

import httpx

from ..errors import BackendError, DataValidationError, TransportError
from ..prompts import MessageSequence, parse_category_response
from .base import Backend, ClassifyResult, FineTuneJob, HyperParams, JobStatus, PriceTable

API_KEY_ENV = "LEAFBENCH_API_KEY"

_STATUS_MAP = {
    "validating_files": JobStatus.PENDING,
    "queued": JobStatus.PENDING,
    "pending": JobStatus.PENDING,
    "running": JobStatus.RUNNING,
    "succeeded": JobStatus.SUCCEEDED,
    "failed": JobStatus.FAILED,
    "cancelled": JobStatus.FAILED,
}


class RemoteBackend(Backend):
    name = "remote"

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        prices: PriceTable = PriceTable(),
        max_attempts: int = 3,
        backoff_s: float = 0.5,
        transport: httpx.BaseTransport | None = None,
        timeout_s: float = 120.0,
    ):
        key = api_key or os.environ.get(API_KEY_ENV, "")
        self.prices = prices
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._idempotency: dict[str, str] = {}
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {key}"} if key else {},
            transport=transport,
            timeout=timeout_s,
        )

    # -- plumbing ----------------------------------------------------------

    def _request(self, method: str, path: str, **kwargs) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                response = self._client.request(method, path, **kwargs)
            except httpx.HTTPError as exc:
                last_exc = exc
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff_s * (2**attempt))
                continue
            if response.status_code >= 500:
                last_exc = TransportError(f"{path}: server error {response.status_code}")
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff_s * (2**attempt))
                continue
            if response.status_code >= 400:
                raise BackendError(f"{path}: {response.status_code} {response.text[:200]}")
            return response.json()
        raise TransportError(f"{path}: giving up after {self.max_attempts} attempts: {last_exc}")

    # -- contract ----------------------------------------------------------

    def upload_training_data(self, train: Path | str, validation: Path | str) -> tuple[str, str]:
        return self._upload_one(train), self._upload_one(validation)

    def _upload_one(self, path: Path | str) -> str:
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataValidationError(path, None, "file is empty")
        for line_no, line in enumerate(lines, start=1):
            try:
                json.loads(line)
            except ValueError as exc:
                raise DataValidationError(path, line_no, f"invalid JSON: {exc}") from exc
        body = self._request(
            "POST",
            "/files",
            files={"file": (path.name, path.read_bytes(), "application/jsonl")},
            data={"purpose": "fine-tune"},
        )
        return body["id"]

    def create_finetune(
        self,
        base_model: str,
        handles: tuple[str, str],
        hp: HyperParams,
        idempotency_key: str | None = None,
    ) -> FineTuneJob:
        if idempotency_key and idempotency_key in self._idempotency:
            return self.poll_job(self._idempotency[idempotency_key])
        hyperparameters: dict = {"n_epochs": hp.epochs, "batch_size": hp.batch_size}
        if hp.learning_rate is not None:
            hyperparameters["learning_rate_multiplier"] = hp.learning_rate
        body = self._request(
            "POST",
            "/fine_tuning/jobs",
            json={
                "model": base_model,
                "training_file": handles[0],
                "validation_file": handles[1],
                "hyperparameters": hyperparameters,
            },
            headers={"Idempotency-Key": idempotency_key} if idempotency_key else {},
        )
        if idempotency_key:
            self._idempotency[idempotency_key] = body["id"]
        return self._job_from_body(body)

    def poll_job(self, job_id: str) -> FineTuneJob:
        return self._job_from_body(self._request("GET", f"/fine_tuning/jobs/{job_id}"))

    def _job_from_body(self, body: dict) -> FineTuneJob:
        raw_status = body.get("status", "pending")
        status = _STATUS_MAP.get(raw_status)
        if status is None:
            raise BackendError(f"unknown job status {raw_status!r}")
        trained_tokens = body.get("trained_tokens")
        # Compatible servers may report flags/losses inline; the provider's
        # own surface buries them in events, which we deliberately do not re-
        # implement: absent fields stay absent.
        flagged = tuple(
            (item["sample_id"], item.get("reason", "flagged"))
            for item in body.get("flagged_samples", [])
        )
        return FineTuneJob(
            job_id=body["id"],
            base_model=body.get("model", ""),
            status=status,
            output_model=body.get("fine_tuned_model"),
            train_loss=body.get("train_loss"),
            full_validation_loss=body.get("full_validation_loss"),
            trained_tokens=trained_tokens,
            trained_samples=body.get("trained_samples"),
            duration_s=float(body.get("finished_at", 0) - body.get("created_at", 0))
            if body.get("finished_at")
            else 0.0,
            cost_usd=self.prices.training_cost(trained_tokens) if trained_tokens else 0.0,
            flagged_samples=flagged,
        )

    def classify(
        self,
        model_id: str,
        prompt: MessageSequence,
        categories: Sequence[str],
        strict: bool = False,
    ) -> ClassifyResult:
        started = time.monotonic()
        body = self._request(
            "POST",
            "/chat/completions",
            json={"model": model_id, "messages": prompt.to_wire(), "max_tokens": 64},
        )
        latency = time.monotonic() - started
        raw = body["choices"][0]["message"]["content"] or ""
        usage = body.get("usage", {})
        try:
            parsed = parse_category_response(raw, categories, strict=strict)
        except Exception:
            parsed = None
        return ClassifyResult(
            raw_text=raw,
            parsed_category=parsed,
            latency_s=latency,
            cost_usd=self.prices.prediction_cost(
                usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)
            ),
        )

    def close(self) -> None:
        self._client.close()
