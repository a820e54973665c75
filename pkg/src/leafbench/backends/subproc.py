"""Backend adapter for a local trainer worker speaking line-delimited JSON.

Protocol (version 1), one JSON object per line over stdin/stdout:

* ``{"cmd": "hello"}`` -> ``{"ok": true, "proto": 1}``
* ``{"cmd": "train", "train_csv": ..., "val_csv": ..., "epochs": ...,
  "batch_size": ..., "learning_rate": ..., "resume_from": ...}`` streams
  ``{"event": "epoch", "epoch": n, "train_loss": ..., "val_loss": ...,
  "val_acc": ...}`` lines and finishes with ``{"event": "done",
  "checkpoint": ..., "duration_s": ...}``
* ``{"cmd": "predict", "checkpoint": ..., "image": ...}`` ->
  ``{"category": ...}``
* any ``{"event": "error", "message": ...}`` terminates the job as failed.

The worker's stdout carries protocol lines only; its logs go to stderr.
Model ids are checkpoint paths; a configured set of symbolic names (default
``{"resnet-50"}``) means "train from the pretrained backbone".
"""

from __future__ import annotations

import csv
import json
import subprocess
import threading
import time
from pathlib import Path
from typing import Sequence

from ..errors import BackendError, DataValidationError, TransportError
from ..prompts import MessageSequence, parse_category_response
from .base import Backend, ClassifyResult, FineTuneJob, HyperParams, JobStatus

PROTO_VERSION = 1


def _image_path(url: str) -> str:
    return url[len("file://"):] if url.startswith("file://") else url


class _WorkerProcess:
    """One worker subprocess plus line-oriented send/receive helpers."""

    def __init__(self, cmd: Sequence[str]):
        try:
            self.proc = subprocess.Popen(
                list(cmd),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"cannot spawn worker {cmd!r}: {exc}") from exc

    def send(self, message: dict) -> None:
        try:
            self.proc.stdin.write(json.dumps(message) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"worker stdin closed: {exc}") from exc

    def recv(self) -> dict | None:
        line = self.proc.stdout.readline()
        if not line:
            return None
        try:
            return json.loads(line)
        except ValueError as exc:
            raise TransportError(f"non-JSON line from worker: {line[:120]!r}") from exc

    def handshake(self) -> None:
        self.send({"cmd": "hello"})
        reply = self.recv()
        if not reply or reply.get("ok") is not True or reply.get("proto") != PROTO_VERSION:
            raise TransportError(f"bad handshake reply {reply!r}")

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class _TrainJob:
    def __init__(self, job: FineTuneJob, worker: _WorkerProcess):
        self.lock = threading.Lock()
        self.job = job
        self.worker = worker
        self.epoch_reports: list[dict] = []


class SubprocessBackend(Backend):
    name = "subprocess"

    def __init__(self, worker_cmd: Sequence[str], base_model_names: frozenset[str] = frozenset({"resnet-50"})):
        self.worker_cmd = list(worker_cmd)
        self.base_model_names = base_model_names
        self._jobs: dict[str, _TrainJob] = {}
        self._idempotency: dict[str, str] = {}
        self._counter = 0
        self._lock = threading.Lock()
        self._predictor: _WorkerProcess | None = None
        self._predict_lock = threading.Lock()

    # -- contract ----------------------------------------------------------

    def upload_training_data(self, train: Path | str, validation: Path | str) -> tuple[str, str]:
        return self._check_manifest(train), self._check_manifest(validation)

    @staticmethod
    def _check_manifest(path: Path | str) -> str:
        path = Path(path)
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if not header or "local_path" not in header or "label" not in header:
                    raise DataValidationError(path, 1, f"not a manifest CSV (header {header})")
                width = len(header)
                count = 0
                for line_no, row in enumerate(reader, start=2):
                    if len(row) != width:
                        raise DataValidationError(path, line_no, f"expected {width} fields, got {len(row)}")
                    count += 1
        except OSError as exc:
            raise DataValidationError(path, None, str(exc)) from exc
        if count == 0:
            raise DataValidationError(path, None, "manifest has no rows")
        return str(path.resolve())

    def create_finetune(
        self,
        base_model: str,
        handles: tuple[str, str],
        hp: HyperParams,
        idempotency_key: str | None = None,
    ) -> FineTuneJob:
        with self._lock:
            if idempotency_key and idempotency_key in self._idempotency:
                return self._jobs[self._idempotency[idempotency_key]].job
            self._counter += 1
            job_id = f"local-{self._counter}"
            if idempotency_key:
                self._idempotency[idempotency_key] = job_id
        worker = _WorkerProcess(self.worker_cmd)
        entry = _TrainJob(
            FineTuneJob(job_id=job_id, base_model=base_model, status=JobStatus.PENDING), worker
        )
        with self._lock:
            self._jobs[job_id] = entry
        resume_from = None if base_model in self.base_model_names else base_model
        request = {
            "cmd": "train",
            "train_csv": handles[0],
            "val_csv": handles[1],
            "epochs": hp.epochs,
            "batch_size": hp.batch_size,
            "learning_rate": hp.learning_rate,
            "resume_from": resume_from,
        }
        thread = threading.Thread(target=self._run_training, args=(entry, request), daemon=True)
        thread.start()
        return entry.job

    def _run_training(self, entry: _TrainJob, request: dict) -> None:
        job = entry.job
        try:
            entry.worker.handshake()
            entry.worker.send(request)
            with entry.lock:
                entry.job = self._snapshot(job, JobStatus.RUNNING)
            while True:
                event = entry.worker.recv()
                if event is None:
                    raise TransportError("worker exited before done event")
                kind = event.get("event")
                if kind == "epoch":
                    with entry.lock:
                        entry.epoch_reports.append(event)
                elif kind == "done":
                    with entry.lock:
                        entry.job = self._finish(entry, event)
                    return
                elif kind == "error":
                    raise BackendError(event.get("message", "worker error"))
                # other events are ignored (forward compatible)
        except Exception:
            with entry.lock:
                entry.job = self._snapshot(entry.job, JobStatus.FAILED)
        finally:
            entry.worker.close()

    @staticmethod
    def _snapshot(job: FineTuneJob, status: JobStatus) -> FineTuneJob:
        return FineTuneJob(job_id=job.job_id, base_model=job.base_model, status=status)

    def _finish(self, entry: _TrainJob, done: dict) -> FineTuneJob:
        job = entry.job
        last = entry.epoch_reports[-1] if entry.epoch_reports else {}
        return FineTuneJob(
            job_id=job.job_id,
            base_model=job.base_model,
            status=JobStatus.SUCCEEDED,
            output_model=done["checkpoint"],
            train_loss=last.get("train_loss"),
            full_validation_loss=last.get("val_loss"),
            trained_samples=None,
            duration_s=float(done.get("duration_s", 0.0)),
            cost_usd=0.0,  # local compute; dollar cost tracking is a remote concern
            flagged_samples=(),
        )

    def poll_job(self, job_id: str) -> FineTuneJob:
        with self._lock:
            entry = self._jobs.get(job_id)
        if entry is None:
            raise BackendError(f"unknown job {job_id}")
        with entry.lock:
            return entry.job

    def request_prune(self, job_id: str) -> None:
        """Ask the worker to stop after the current epoch (best checkpoint kept)."""
        with self._lock:
            entry = self._jobs.get(job_id)
        if entry is None:
            raise BackendError(f"unknown job {job_id}")
        entry.worker.send({"cmd": "prune"})

    def get_epoch_reports(self, job_id: str) -> list[dict]:
        with self._lock:
            entry = self._jobs.get(job_id)
        if entry is None:
            raise BackendError(f"unknown job {job_id}")
        with entry.lock:
            return list(entry.epoch_reports)

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
        started = time.monotonic()
        with self._predict_lock:
            if self._predictor is None or self._predictor.proc.poll() is not None:
                self._predictor = _WorkerProcess(self.worker_cmd)
                self._predictor.handshake()
            self._predictor.send(
                {"cmd": "predict", "checkpoint": model_id, "image": _image_path(urls[0])}
            )
            reply = self._predictor.recv()
        latency = time.monotonic() - started
        if reply is None:
            raise TransportError("worker exited during predict")
        raw = json.dumps(reply)
        parsed = None
        if "category" in reply and reply.get("event") != "error":
            try:
                parsed = parse_category_response(raw, categories, strict=strict)
            except Exception:
                parsed = None
        return ClassifyResult(raw_text=raw, parsed_category=parsed, latency_s=latency, cost_usd=0.0)

    def close(self) -> None:
        with self._predict_lock:
            if self._predictor is not None:
                self._predictor.close()
                self._predictor = None
