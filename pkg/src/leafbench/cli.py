"""Operator-facing command line: curate, optimize, fine-tune, predict, report.

Every subcommand writes into the run directory and is idempotent under
re-invocation (resume semantics); exit status is 0 iff no operation-level
error occurred.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from pathlib import Path

import click

from . import dataset as ds
from . import evaluation, scheduler, tpe
from .backends.base import HyperParams, JobStatus
from .config import RunConfig, load_config, make_backend
from .errors import LeafbenchError
from .scheduler import HpSource, MatrixSpec, Regime, RunPaths

log = logging.getLogger(__name__)


def _config_from_ctx(ctx: click.Context) -> RunConfig:
    return load_config(ctx.obj.get("config_path"), overrides=ctx.obj.get("overrides", {}))


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="TOML config file (or set LEAFBENCH_CONFIG).")
@click.option("--run-dir", default=None, help="Run directory for all artifacts.")
@click.option("--dataset-root", default=None, help="Corpus root (plant/label folders).")
@click.option("--backend", default=None, type=click.Choice(["mock", "remote", "subprocess"]),
              help="Fine-tune/predict backend.")
@click.option("--seed", default=None, type=int, help="Global seed (default 42).")
@click.option("--base-model", default=None, help="Base model identifier.")
@click.option("--url-base", default=None, help="Public URL prefix for hosted images.")
@click.option("--parallelism", default=None, type=int, help="Concurrent predictions per sweep.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def main(ctx, config_path, run_dir, dataset_root, backend, seed, base_model, url_base,
         parallelism, verbose):
    """Benchmark harness for leaf-disease classifier fine-tuning experiments."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = {
        "run_dir": run_dir,
        "dataset_root": dataset_root,
        "backend": backend,
        "seed": seed,
        "base_model": base_model,
        "url_base": url_base,
        "parallelism": parallelism,
    }


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _parse_plants(config: RunConfig, plants: str | None) -> tuple[str, ...]:
    chosen = tuple(p.strip() for p in plants.split(",")) if plants else tuple(config.plants)
    for plant in chosen:
        if plant not in ds.PLANT_CLASSES:
            _fail(f"unknown plant {plant!r}")
    return chosen


def _parse_resolutions(config: RunConfig, resolutions: str | None) -> tuple[int, ...]:
    chosen = (
        tuple(int(r.strip()) for r in resolutions.split(",")) if resolutions
        else tuple(config.resolutions)
    )
    for res in chosen:
        if res not in ds.RESOLUTIONS:
            _fail(f"resolution {res} not in {ds.RESOLUTIONS}")
    return chosen


def _curate_one(config: RunConfig, paths: RunPaths, plant: str, resolutions: tuple[int, ...]) -> None:
    root = Path(config.dataset_root)
    manifest = ds.scan_dataset(root, plant)
    if not manifest.samples:
        raise LeafbenchError(f"no images for {plant!r} under {root}")
    balanced = ds.undersample_balance(manifest, config.per_class, config.seed)
    split = ds.split_dataset(balanced, config.seed)
    split = ds.partition_phases(split, phase_size=len(split.train) // 4)
    url_base = config.effective_url_base()
    for sized in ds.make_thumbnails(balanced, sorted(resolutions)):
        sized = ds.with_public_urls(sized, url_base, root)
        dest = paths.manifest_csv(plant, sized.resolution_px)
        ds.export_manifest_csv(sized, split, dest)
        click.echo(f"wrote {dest} ({len(sized)} samples)")


@main.command()
@click.option("--plant", "plants", default=None, help="Comma-separated plants (default: config).")
@click.option("--per-class", default=None, type=int, help="Samples kept per class (default 200).")
@click.option("--resolutions", default=None, help="Comma-separated sizes (default 100,150,256).")
@click.pass_context
def curate(ctx, plants, per_class, resolutions):
    """Scan, balance, split, thumbnail and export manifests."""
    config = _config_from_ctx(ctx)
    if per_class is not None:
        config.per_class = per_class
    paths = RunPaths(config.run_dir).ensure()
    try:
        for plant in _parse_plants(config, plants):
            _curate_one(config, paths, plant, _parse_resolutions(config, resolutions))
    except LeafbenchError as exc:
        _fail(str(exc))


def _load_domain(paths: RunPaths, plant: str, resolution: int):
    path = paths.manifest_csv(plant, resolution)
    if not path.exists():
        _fail(f"no curated manifest at {path}; run curate first")
    return ds.import_manifest_csv(path)


def _study_paths(paths: RunPaths, plant: str, resolution: int) -> tuple[Path, Path, Path]:
    stem = f"{plant}-{resolution}"
    return (
        paths.studies / f"{stem}.study.jsonl",
        paths.studies / f"{stem}.summary.csv",
        paths.studies / f"{stem}.best.json",
    )


@main.command()
@click.option("--plant", required=True)
@click.option("--resolution", required=True, type=int)
@click.option("--n-trials", default=None, type=int, help="Optimization trials (default 30).")
@click.pass_context
def optimize(ctx, plant, resolution, n_trials):
    """Search hyperparameters with TPE against the configured backend."""
    config = _config_from_ctx(ctx)
    paths = RunPaths(config.run_dir).ensure()
    manifest, split = _load_domain(paths, plant, resolution)
    backend = make_backend(config)
    files = scheduler.ensure_finetune_files(manifest, split, paths)
    validation = ds.subset(manifest, split.validation)
    ledger_path, summary_path, best_path = _study_paths(paths, plant, resolution)
    ledger_path.unlink(missing_ok=True)

    handles = backend.upload_training_data(files["train"], files["validation"])
    ctx_base = scheduler.prompt_context_for(manifest)

    def objective(params: dict, probe: tpe.TrialProbe) -> tpe.TrialRecord:
        hp = HyperParams(
            epochs=int(params["epochs"]),
            batch_size=int(params["batch_size"]),
            learning_rate=float(params["learning_rate"]),
        )
        key = f"study:{plant}-{resolution}:{json.dumps(params, sort_keys=True)}"
        job = backend.create_finetune(config.resolved_base_model(), handles, hp, idempotency_key=key)
        final = backend.wait_for_job(job.job_id, config.poll_interval_s)
        if final.status is not JobStatus.SUCCEEDED:
            return tpe.TrialRecord.failed()
        correct = 0
        for sample in validation.samples:
            url = sample.public_url or f"file://{sample.local_path}"
            prompt = scheduler.render_classification_prompt(
                dataclasses.replace(ctx_base, image_url=url)
            )
            result = backend.classify(final.output_model, prompt, ctx_base.categories)
            correct += result.parsed_category == sample.label
        accuracy = correct / len(validation.samples)
        # per-epoch curve approaches the final accuracy; honors pruning
        for epoch in range(hp.epochs):
            probe.report(accuracy * (epoch + 1) / hp.epochs)
            if probe.should_prune():
                return tpe.TrialRecord.pruned(probe.values)
        return tpe.TrialRecord.complete(accuracy, probe.values)

    try:
        best, history = tpe.run_study(
            objective,
            config.search_space(),
            n_trials=n_trials or config.n_trials,
            seed=config.seed,
            config=tpe.TPEConfig(gamma=config.gamma, n_startup=config.n_startup,
                                 n_candidates=config.n_candidates),
            ledger_path=ledger_path,
            summary_path=summary_path,
        )
    except LeafbenchError as exc:
        _fail(str(exc))
    best_path.write_text(json.dumps({"params": best.params, "objective": best.objective}, indent=2),
                         encoding="utf-8")
    click.echo(f"best trial {best.trial_id}: {best.params} (objective {best.objective:.4f})")


def _full_hp(config: RunConfig, paths: RunPaths, plant: str, resolution: int) -> tuple[HyperParams, HpSource]:
    best_path = _study_paths(paths, plant, resolution)[2]
    if best_path.exists():
        params = json.loads(best_path.read_text(encoding="utf-8"))["params"]
        return (
            HyperParams(epochs=int(params["epochs"]), batch_size=int(params["batch_size"]),
                        learning_rate=float(params["learning_rate"])),
            HpSource.TPE_STUDY,
        )
    return config.default_full_hp(), HpSource.BACKEND_DEFAULT


def _matrix_spec(config: RunConfig, paths: RunPaths, plants, resolutions, regimes) -> MatrixSpec:
    overrides = {}
    for plant in plants:
        for res in resolutions:
            hp, source = _full_hp(config, paths, plant, res)
            if source is HpSource.TPE_STUDY:
                overrides[(plant, res)] = hp
    return MatrixSpec(
        plants=plants,
        resolutions=resolutions,
        regimes=tuple(Regime(r) for r in regimes),
        backend_name=config.backend,
        base_model=config.resolved_base_model(),
        full_hp=config.default_full_hp(),
        full_hp_overrides=overrides or None,
        parallelism=config.parallelism,
        poll_interval_s=config.poll_interval_s,
        strict_flagging=config.strict_flagging,
    )


def _run_matrix(ctx, plants, resolutions, regimes) -> None:
    config = _config_from_ctx(ctx)
    paths = RunPaths(config.run_dir).ensure()
    chosen_plants = _parse_plants(config, plants)
    chosen_res = _parse_resolutions(config, resolutions)
    for plant in chosen_plants:
        for res in chosen_res:
            if not paths.manifest_csv(plant, res).exists():
                _curate_one(config, paths, plant, chosen_res)
                break
    try:
        backend = make_backend(config)
        spec = _matrix_spec(config, paths, chosen_plants, chosen_res, regimes)
        result = scheduler.run_matrix(backend, spec, paths)
    except LeafbenchError as exc:
        _fail(str(exc))
    click.echo(
        f"fine-tunes: {len(result.ft_entries)} full, {len(result.prog_entries)} progressive; "
        f"sweeps: {len(result.sweeps)}"
    )
    if result.sweeps:
        evaluation.emit_report(paths)
        click.echo(f"reports written under {paths.reports}")
    if result.failures:
        for failure in result.failures:
            click.echo(f"failure: {failure}", err=True)
        sys.exit(1)


@main.command()
@click.option("--plants", default=None, help="Comma-separated plants.")
@click.option("--resolutions", default=None, help="Comma-separated resolutions.")
@click.pass_context
def finetune(ctx, plants, resolutions):
    """Full-train-set fine-tunes (one per plant and resolution)."""
    _run_matrix(ctx, plants, resolutions, ("full",))


@main.command()
@click.option("--plants", default=None)
@click.option("--resolutions", default=None)
@click.pass_context
def progressive(ctx, plants, resolutions):
    """Four-phase progressive fine-tuning chains."""
    _run_matrix(ctx, plants, resolutions, ("progressive",))


@main.command()
@click.option("--plants", default=None)
@click.option("--resolutions", default=None)
@click.pass_context
def zeroshot(ctx, plants, resolutions):
    """Zero-shot prediction sweeps with the unmodified base model."""
    _run_matrix(ctx, plants, resolutions, ("zero_shot",))


@main.command()
@click.option("--plants", default=None, help="Comma-separated plants.")
@click.option("--resolutions", default=None, help="Comma-separated resolutions.")
@click.option("--regimes", default=None, help="Comma-separated regimes (default: config).")
@click.option("--backend", default=None, type=click.Choice(["mock", "remote", "subprocess"]),
              help="Backend override for this run.")
@click.pass_context
def matrix(ctx, plants, resolutions, regimes, backend):
    """The full experiment grid: fine-tunes, sweeps, cross evaluations."""
    if backend:
        ctx.obj["overrides"]["backend"] = backend
    config = _config_from_ctx(ctx)
    chosen = tuple(r.strip() for r in regimes.split(",")) if regimes else tuple(config.regimes)
    _run_matrix(ctx, plants, resolutions, chosen)


@main.command()
@click.option("--model", "model_id", required=True, help="Model id to query.")
@click.option("--test", "domain", required=True, help="Test domain as plant/resolution, e.g. corn/256.")
@click.option("--limit", default=0, type=int, help="Predict at most N samples (0 = all).")
@click.pass_context
def predict(ctx, model_id, domain, limit):
    """Run a prediction sweep and print records as JSON lines."""
    config = _config_from_ctx(ctx)
    paths = RunPaths(config.run_dir).ensure()
    try:
        plant, resolution = domain.split("/")
        manifest, split = _load_domain(paths, plant, int(resolution))
    except ValueError:
        _fail(f"--test must look like plant/resolution, got {domain!r}")
    test_manifest = ds.subset(manifest, split.test)
    if limit:
        test_manifest = dataclasses.replace(test_manifest, samples=test_manifest.samples[:limit])
    meta = scheduler.SweepMeta(
        sweep_id=f"adhoc-{plant}-{resolution}-{model_id}".replace("/", "_"),
        model_id=model_id, test_plant=plant, test_resolution=int(resolution),
    )
    try:
        sweep = scheduler.run_prediction_sweep(
            make_backend(config), model_id, test_manifest, meta, paths, config.parallelism
        )
    except LeafbenchError as exc:
        _fail(str(exc))
    for record in sweep.records:
        click.echo(json.dumps(record.to_json_obj()))


@main.command()
@click.pass_context
def evaluate(ctx):
    """Per-sweep metrics JSON and heatmaps for everything in the run directory."""
    config = _config_from_ctx(ctx)
    paths = RunPaths(config.run_dir)
    sweeps = scheduler.load_sweeps(paths)
    if not sweeps:
        _fail("nothing to evaluate: no prediction sweeps found")
    out = paths.reports / "heatmaps"
    for sweep_id, sweep in sorted(sweeps.items()):
        cm, report = evaluation.metrics_for_sweep(sweep)
        evaluation.emit_heatmap(cm, out / f"{sweep_id}.svg", out / f"{sweep_id}.csv")
        payload = {
            "sweep_id": sweep_id,
            "accuracy": report.accuracy,
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "duration_s": report.duration_s,
            "cost_usd": report.cost_usd,
        }
        (paths.predictions / f"{sweep_id}.metrics.json").write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8"
        )
        click.echo(f"{sweep_id}: accuracy {report.accuracy:.4f}")


@main.command()
@click.pass_context
def report(ctx):
    """Emit all report CSVs, heatmaps and the Markdown summary."""
    config = _config_from_ctx(ctx)
    paths = RunPaths(config.run_dir)
    try:
        written = evaluation.emit_report(paths)
    except LeafbenchError as exc:
        _fail(str(exc))
    for name, path in written.items():
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
