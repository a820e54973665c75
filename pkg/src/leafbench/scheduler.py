"""Experiment orchestration: fine-tune plans, progressive chains, prediction sweeps.

Every job transition is persisted to an append-only journal under the run
directory; re-running any operation replays the journal and skips completed
work, so an interrupted run resumes to the same final state (modulo wall
times). Prediction sweeps persist records incrementally and deduplicate by
sample id on resume.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .backends.base import Backend, ClassifyResult, FineTuneJob, HyperParams, JobStatus
from .dataset import DatasetManifest, SplitSpec, subset
from .errors import SchedulerError
from .prompts import PromptContext, render_classification_prompt, render_finetune_record, write_jsonl

log = logging.getLogger(__name__)

# The provider-default configuration used by the progressive regime.
PROGRESSIVE_DEFAULT_HP = HyperParams(epochs=3, batch_size=1)


class Regime(str, Enum):
    FULL = "full"
    PROGRESSIVE = "progressive"
    ZERO_SHOT = "zero_shot"


class HpSource(str, Enum):
    TPE_STUDY = "tpe_study"
    BACKEND_DEFAULT = "backend_default"


@dataclass(frozen=True)
class ExperimentPlan:
    plant: str
    resolution_px: int
    regime: Regime
    hp_source: HpSource
    backend: str
    base_model: str

    def __post_init__(self):
        if self.regime is Regime.PROGRESSIVE and self.hp_source is not HpSource.BACKEND_DEFAULT:
            raise SchedulerError("progressive plans use backend-default hyperparameters")

    @property
    def plan_id(self) -> str:
        return f"{self.plant}-{self.resolution_px}-{self.regime.value}"


@dataclass(frozen=True)
class JobLedgerEntry:
    plan_id: str
    phase: int | None
    job: FineTuneJob
    submitted: int
    hp: HyperParams | None = None

    @property
    def output_model(self) -> str | None:
        return self.job.output_model

    @property
    def errors(self) -> int:
        return len(self.job.flagged_samples)

    @property
    def trained_count(self) -> int | None:
        if self.job.trained_samples is not None:
            return self.job.trained_samples
        return self.submitted - self.errors

    def to_json_obj(self) -> dict:
        job = dataclasses.asdict(self.job)
        job["status"] = self.job.status.value
        job["flagged_samples"] = [list(pair) for pair in self.job.flagged_samples]
        return {
            "plan_id": self.plan_id,
            "phase": self.phase,
            "submitted": self.submitted,
            "hp": dataclasses.asdict(self.hp) if self.hp else None,
            "job": job,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "JobLedgerEntry":
        raw = dict(obj["job"])
        raw["status"] = JobStatus(raw["status"])
        raw["flagged_samples"] = tuple((sid, reason) for sid, reason in raw["flagged_samples"])
        return cls(
            plan_id=obj["plan_id"],
            phase=obj["phase"],
            submitted=obj["submitted"],
            hp=HyperParams(**obj["hp"]) if obj.get("hp") else None,
            job=FineTuneJob(**raw),
        )


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    true_label: str
    raw_text: str
    parsed_category: str | None
    latency_s: float
    cost_usd: float

    def to_json_obj(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SweepMeta:
    """Where a sweep's predictions came from, recorded next to the records."""

    sweep_id: str
    model_id: str
    test_plant: str
    test_resolution: int
    train_plant: str | None = None
    train_resolution: int | None = None
    regime: str | None = None
    phase: int | None = None


@dataclass
class SweepResult:
    meta: SweepMeta
    records: list[PredictionRecord]

    @property
    def duration_s(self) -> float:
        return sum(r.latency_s for r in self.records)

    @property
    def cost_usd(self) -> float:
        return sum(r.cost_usd for r in self.records)


class RunPaths:
    """Fixed run-directory layout so tooling can rely on it."""

    def __init__(self, run_dir: Path | str):
        self.root = Path(run_dir)

    @property
    def manifests(self) -> Path:
        return self.root / "manifests"

    @property
    def jsonl(self) -> Path:
        return self.root / "jsonl"

    @property
    def studies(self) -> Path:
        return self.root / "studies"

    @property
    def jobs(self) -> Path:
        return self.root / "jobs"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def journal_path(self) -> Path:
        return self.jobs / "journal.jsonl"

    def manifest_csv(self, plant: str, resolution_px: int) -> Path:
        return self.manifests / f"{plant}-{resolution_px}.csv"

    def sweep_records(self, sweep_id: str) -> Path:
        return self.predictions / f"{sweep_id}.jsonl"

    def sweep_meta(self, sweep_id: str) -> Path:
        return self.predictions / f"{sweep_id}.meta.json"

    def ensure(self) -> "RunPaths":
        for p in (self.manifests, self.jsonl, self.studies, self.jobs, self.predictions, self.reports):
            p.mkdir(parents=True, exist_ok=True)
        return self


class Journal:
    """Append-only JSON-lines journal of job creations and terminal entries."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.created: list[dict] = []
        self.entries: dict[tuple[str, int | None], JobLedgerEntry] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                event = json.loads(line)
                if event["event"] == "created":
                    self.created.append(event)
                elif event["event"] == "entry":
                    entry = JobLedgerEntry.from_json_obj(event)
                    self.entries[(entry.plan_id, entry.phase)] = entry

    def _append(self, obj: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj) + "\n")

    def record_created(self, plan_id: str, phase: int | None, job_id: str, idempotency_key: str) -> None:
        event = {"event": "created", "plan_id": plan_id, "phase": phase,
                 "job_id": job_id, "idempotency_key": idempotency_key}
        self.created.append(event)
        self._append(event)

    def record_entry(self, entry: JobLedgerEntry) -> None:
        key = (entry.plan_id, entry.phase)
        if key in self.entries:
            raise SchedulerError(f"duplicate ledger entry for {key}")
        self.entries[key] = entry
        self._append({"event": "entry", **entry.to_json_obj()})

    def completed(self, plan_id: str, phase: int | None) -> JobLedgerEntry | None:
        entry = self.entries.get((plan_id, phase))
        if entry is not None and entry.job.status is JobStatus.SUCCEEDED:
            return entry
        return None


def prompt_context_for(manifest: DatasetManifest, image_url: str | None = None) -> PromptContext:
    from .dataset import PLANT_CLASSES

    return PromptContext(
        plant=manifest.plant,
        categories=tuple(sorted(PLANT_CLASSES[manifest.plant])),
        image_url=image_url,
    )


def ensure_finetune_files(
    manifest: DatasetManifest, split: SplitSpec, paths: RunPaths
) -> dict[str, Path]:
    """Render train/validation/phase JSONL files once; reuse on resume."""
    ctx = prompt_context_for(manifest)
    stem = f"{manifest.plant}-{manifest.resolution_px}"
    wanted: dict[str, tuple[str, ...]] = {
        "train": split.train,
        "validation": split.validation,
    }
    for k, phase_ids in enumerate(split.phases, start=1):
        wanted[f"phase{k}"] = phase_ids
    out: dict[str, Path] = {}
    for name, ids in wanted.items():
        dest = paths.jsonl / f"{stem}-{name}.jsonl"
        if not dest.exists():
            records = [render_finetune_record(s, ctx) for s in subset(manifest, ids).samples]
            write_jsonl(records, dest)
        out[name] = dest
    return out


def _run_one_job(
    backend: Backend,
    journal: Journal,
    plan: ExperimentPlan,
    phase: int | None,
    base_model: str,
    train_path: Path,
    validation_path: Path,
    hp: HyperParams,
    submitted: int,
    poll_interval_s: float,
    strict_flagging: bool,
) -> JobLedgerEntry:
    done = journal.completed(plan.plan_id, phase)
    if done is not None:
        return done
    handles = backend.upload_training_data(train_path, validation_path)
    key = f"{plan.plan_id}:{phase if phase is not None else 'full'}"
    job = backend.create_finetune(base_model, handles, hp, idempotency_key=key)
    journal.record_created(plan.plan_id, phase, job.job_id, key)
    final = backend.wait_for_job(job.job_id, poll_interval_s)
    entry = JobLedgerEntry(plan_id=plan.plan_id, phase=phase, job=final, submitted=submitted, hp=hp)
    journal.record_entry(entry)
    if strict_flagging and final.flagged_samples:
        raise SchedulerError(
            f"{plan.plan_id} phase {phase}: {len(final.flagged_samples)} samples flagged "
            "and strict flagging is enabled"
        )
    return entry


def run_full_finetune(
    backend: Backend,
    plan: ExperimentPlan,
    files: dict[str, Path],
    split: SplitSpec,
    hp: HyperParams,
    journal: Journal,
    poll_interval_s: float = 0.0,
    strict_flagging: bool = False,
) -> JobLedgerEntry:
    """One fine-tune over the full train set; persisted even on failure."""
    if plan.regime is not Regime.FULL:
        raise SchedulerError(f"{plan.plan_id} is not a full-regime plan")
    return _run_one_job(
        backend, journal, plan, None, plan.base_model,
        files["train"], files["validation"], hp,
        submitted=len(split.train), poll_interval_s=poll_interval_s,
        strict_flagging=strict_flagging,
    )


def run_progressive(
    backend: Backend,
    plan: ExperimentPlan,
    files: dict[str, Path],
    split: SplitSpec,
    journal: Journal,
    poll_interval_s: float = 0.0,
    strict_flagging: bool = False,
) -> list[JobLedgerEntry]:
    """Chained fine-tunes: phase k starts from phase k-1's output model.

    The same validation file is passed to every phase. The chain halts on a
    failed phase; completed phases are returned alongside the failed entry.
    """
    if plan.regime is not Regime.PROGRESSIVE:
        raise SchedulerError(f"{plan.plan_id} is not a progressive plan")
    if not split.phases:
        raise SchedulerError(f"{plan.plan_id}: split has no phases")
    entries: list[JobLedgerEntry] = []
    base_model = plan.base_model
    for k, phase_ids in enumerate(split.phases, start=1):
        entry = _run_one_job(
            backend, journal, plan, k, base_model,
            files[f"phase{k}"], files["validation"], PROGRESSIVE_DEFAULT_HP,
            submitted=len(phase_ids), poll_interval_s=poll_interval_s,
            strict_flagging=strict_flagging,
        )
        entries.append(entry)
        if entry.job.status is not JobStatus.SUCCEEDED:
            log.warning("%s halted at phase %d (job %s failed)", plan.plan_id, k, entry.job.job_id)
            break
        base_model = entry.job.output_model
    return entries


def _load_existing_records(path: Path) -> dict[str, PredictionRecord]:
    out: dict[str, PredictionRecord] = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            obj = json.loads(line)
            out[obj["sample_id"]] = PredictionRecord(**obj)
    return out


def run_prediction_sweep(
    backend: Backend,
    model_id: str,
    test_manifest: DatasetManifest,
    meta: SweepMeta,
    paths: RunPaths,
    parallelism: int = 4,
    strict_parse: bool = False,
) -> SweepResult:
    """One prediction per test sample, in manifest order, resumable.

    Per-sample failures are recorded as unparseable predictions and the sweep
    continues; a flaky backend can never shrink the test set.
    """
    records_path = paths.sweep_records(meta.sweep_id)
    meta_path = paths.sweep_meta(meta.sweep_id)
    existing = _load_existing_records(records_path)
    ctx_base = prompt_context_for(test_manifest)

    def classify(sample) -> PredictionRecord:
        if sample.id in existing:
            return existing[sample.id]
        url = sample.public_url or f"file://{sample.local_path}"
        prompt = render_classification_prompt(
            dataclasses.replace(ctx_base, image_url=url)
        )
        try:
            result: ClassifyResult = backend.classify(model_id, prompt, ctx_base.categories, strict=strict_parse)
        except Exception as exc:
            log.warning("%s: prediction for %s failed permanently: %s", meta.sweep_id, sample.id, exc)
            result = ClassifyResult(raw_text=f"<error: {exc}>", parsed_category=None, latency_s=0.0, cost_usd=0.0)
        return PredictionRecord(
            sample_id=sample.id,
            true_label=sample.label,
            raw_text=result.raw_text,
            parsed_category=result.parsed_category,
            latency_s=result.latency_s,
            cost_usd=result.cost_usd,
        )

    records: list[PredictionRecord] = []
    paths.predictions.mkdir(parents=True, exist_ok=True)
    fresh = [s for s in test_manifest.samples if s.id not in existing]
    with open(records_path, "a", encoding="utf-8") as fh:
        with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
            # pool.map preserves sample order, so incremental appends stay ordered
            for record in pool.map(classify, fresh):
                fh.write(json.dumps(record.to_json_obj()) + "\n")
                fh.flush()
                existing[record.sample_id] = record

    for sample in test_manifest.samples:
        records.append(existing[sample.id])
    # rewrite in manifest order so resumed sweeps converge to identical bytes
    with open(records_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_obj()) + "\n")
    meta_path.write_text(json.dumps(dataclasses.asdict(meta), indent=2) + "\n", encoding="utf-8")
    return SweepResult(meta=meta, records=records)


@dataclass(frozen=True)
class MatrixSpec:
    """The experiment cross-product: plants x resolutions x regimes.

    ``full_hp`` drives every full-regime plan unless a per-domain override
    (typically a TPE study result) is present in ``full_hp_overrides``.
    """

    plants: tuple[str, ...]
    resolutions: tuple[int, ...]
    regimes: tuple[Regime, ...]
    backend_name: str
    base_model: str
    full_hp: HyperParams
    full_hp_overrides: Mapping[tuple[str, int], HyperParams] | None = None
    parallelism: int = 4
    poll_interval_s: float = 0.0
    strict_flagging: bool = False

    def hp_for(self, plant: str, resolution_px: int) -> tuple[HyperParams, HpSource]:
        if self.full_hp_overrides and (plant, resolution_px) in self.full_hp_overrides:
            return self.full_hp_overrides[(plant, resolution_px)], HpSource.TPE_STUDY
        return self.full_hp, HpSource.BACKEND_DEFAULT


@dataclass
class MatrixResult:
    ft_entries: list[JobLedgerEntry] = field(default_factory=list)
    prog_entries: list[JobLedgerEntry] = field(default_factory=list)
    sweeps: list[SweepResult] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _load_curated(paths: RunPaths, plant: str, resolution_px: int):
    from .dataset import import_manifest_csv

    path = paths.manifest_csv(plant, resolution_px)
    if not path.exists():
        raise SchedulerError(f"no curated manifest at {path}; run curate first")
    return import_manifest_csv(path)


def run_matrix(backend: Backend, spec: MatrixSpec, paths: RunPaths) -> MatrixResult:
    """Execute the full experiment grid, resumably, writing every ledger.

    Fine-tunes run first (full then progressive), then prediction sweeps:
    one per fine-tuned model on its own test set, one zero-shot sweep per
    (plant, resolution), and the cross-resolution / cross-plant sweeps for
    every ordered pair, using each domain's trained model.
    """
    paths.ensure()
    journal = Journal(paths.journal_path)
    result = MatrixResult()
    curated: dict[tuple[str, int], tuple[DatasetManifest, SplitSpec]] = {}
    for plant in spec.plants:
        for res in spec.resolutions:
            curated[(plant, res)] = _load_curated(paths, plant, res)

    trained_model: dict[tuple[str, int], str] = {}
    for (plant, res), (manifest, split) in curated.items():
        if Regime.FULL in spec.regimes or Regime.PROGRESSIVE in spec.regimes:
            files = ensure_finetune_files(manifest, split, paths)
        if Regime.FULL in spec.regimes:
            hp, hp_source = spec.hp_for(plant, res)
            plan = ExperimentPlan(plant, res, Regime.FULL, hp_source,
                                  spec.backend_name, spec.base_model)
            try:
                entry = run_full_finetune(backend, plan, files, split, hp, journal,
                                          spec.poll_interval_s, spec.strict_flagging)
                result.ft_entries.append(entry)
                if entry.job.status is JobStatus.SUCCEEDED:
                    trained_model[(plant, res)] = entry.job.output_model
                else:
                    result.failures.append(f"{plan.plan_id}: fine-tune failed")
            except SchedulerError as exc:
                result.failures.append(str(exc))
        if Regime.PROGRESSIVE in spec.regimes:
            plan = ExperimentPlan(plant, res, Regime.PROGRESSIVE, HpSource.BACKEND_DEFAULT,
                                  spec.backend_name, spec.base_model)
            try:
                entries = run_progressive(backend, plan, files, split, journal,
                                          spec.poll_interval_s, spec.strict_flagging)
                result.prog_entries.extend(entries)
                if len(entries) < len(split.phases) or entries[-1].job.status is not JobStatus.SUCCEEDED:
                    result.failures.append(f"{plan.plan_id}: chain halted")
                elif (plant, res) not in trained_model:
                    trained_model[(plant, res)] = entries[-1].job.output_model
            except SchedulerError as exc:
                result.failures.append(str(exc))

    def sweep(sweep_id: str, model_id: str, plant: str, res: int, **meta_extra) -> None:
        manifest, split = curated[(plant, res)]
        test_manifest = subset(manifest, split.test)
        meta = SweepMeta(sweep_id=sweep_id, model_id=model_id, test_plant=plant,
                         test_resolution=res, **meta_extra)
        try:
            result.sweeps.append(
                run_prediction_sweep(backend, model_id, test_manifest, meta, paths, spec.parallelism)
            )
        except Exception as exc:  # a lost sweep is a failure, not a crash
            log.warning("sweep %s failed: %s", sweep_id, exc)
            result.failures.append(f"{sweep_id}: {exc}")

    for (plant, res), (manifest, split) in curated.items():
        if Regime.FULL in spec.regimes:
            entry = journal.completed(f"{plant}-{res}-full", None)
            if entry:
                sweep(f"{plant}-{res}-full", entry.job.output_model, plant, res,
                      train_plant=plant, train_resolution=res, regime="full")
        if Regime.PROGRESSIVE in spec.regimes:
            for k in range(1, len(split.phases) + 1):
                entry = journal.completed(f"{plant}-{res}-progressive", k)
                if entry:
                    sweep(f"{plant}-{res}-phase{k}", entry.job.output_model, plant, res,
                          train_plant=plant, train_resolution=res, regime="progressive", phase=k)
        if Regime.ZERO_SHOT in spec.regimes:
            sweep(f"{plant}-{res}-zeroshot", spec.base_model, plant, res, regime="zero_shot")

    if trained_model:
        for plant in spec.plants:
            for train_res in spec.resolutions:
                model = trained_model.get((plant, train_res))
                if model is None:
                    continue
                for test_res in spec.resolutions:
                    if test_res == train_res:
                        continue
                    sweep(f"{plant}-train{train_res}-test{test_res}", model, plant, test_res,
                          train_plant=plant, train_resolution=train_res, regime="cross_resolution")
        for res in spec.resolutions:
            for train_plant in spec.plants:
                model = trained_model.get((train_plant, res))
                if model is None:
                    continue
                for test_plant in spec.plants:
                    if test_plant == train_plant:
                        continue
                    sweep(f"{train_plant}-to-{test_plant}-{res}", model, test_plant, res,
                          train_plant=train_plant, train_resolution=res, regime="cross_plant")
    return result


def load_sweeps(paths: RunPaths) -> dict[str, SweepResult]:
    """All persisted sweeps in the run directory."""
    sweeps: dict[str, SweepResult] = {}
    if not paths.predictions.is_dir():
        return sweeps
    for meta_path in sorted(paths.predictions.glob("*.meta.json")):
        meta = SweepMeta(**json.loads(meta_path.read_text(encoding="utf-8")))
        records_path = paths.sweep_records(meta.sweep_id)
        if not records_path.exists():
            continue
        records = [
            PredictionRecord(**json.loads(line))
            for line in records_path.read_text(encoding="utf-8").splitlines()
        ]
        sweeps[meta.sweep_id] = SweepResult(meta=meta, records=records)
    return sweeps


def load_ledger_entries(paths: RunPaths) -> tuple[list[JobLedgerEntry], list[JobLedgerEntry]]:
    """(full entries, progressive entries) from the journal, in stable order."""
    journal = Journal(paths.journal_path)
    entries = sorted(journal.entries.values(), key=lambda e: (e.plan_id, e.phase or 0))
    full = [e for e in entries if e.phase is None]
    prog = [e for e in entries if e.phase is not None]
    return full, prog
