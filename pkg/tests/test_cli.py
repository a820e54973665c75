from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from leafbench.cli import main
from leafbench.config import RunConfig, load_config, make_backend
from leafbench.errors import LeafbenchError
from leafbench.scheduler import Journal, RunPaths

from conftest import build_corpus


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    root = build_corpus(base / "data", per_class=25, size=32)
    return base, root


def invoke(args, **kwargs):
    result = CliRunner().invoke(main, args, catch_exceptions=False, **kwargs)
    return result


def base_args(base, root, run="run"):
    return ["--run-dir", str(base / run), "--dataset-root", str(root), "--backend", "mock"]


@pytest.fixture(scope="module")
def curated_cli(workdir):
    base, root = workdir
    result = invoke([*base_args(base, root), "curate", "--per-class", "25"])
    assert result.exit_code == 0, result.output
    return base, root


class TestCurate:
    def test_writes_manifest_per_resolution(self, curated_cli):
        base, _ = curated_cli
        for plant in ("apple", "corn"):
            for res in (100, 150, 256):
                path = base / "run" / "manifests" / f"{plant}-{res}.csv"
                assert path.exists()
                assert len(path.read_text().splitlines()) == 101

    def test_rerun_byte_identical(self, curated_cli):
        base, root = curated_cli
        manifests = sorted((base / "run" / "manifests").glob("*.csv"))
        before = {p.name: p.read_bytes() for p in manifests}
        result = invoke([*base_args(base, root), "curate", "--per-class", "25"])
        assert result.exit_code == 0
        after = {p.name: p.read_bytes() for p in manifests}
        assert before == after

    def test_empty_dir_errors_to_stderr(self, tmp_path):
        (tmp_path / "data" / "apple").mkdir(parents=True)
        result = invoke(
            ["--run-dir", str(tmp_path / "run"), "--dataset-root", str(tmp_path / "data"), "curate"]
        )
        assert result.exit_code != 0
        assert "error:" in result.stderr

    def test_unknown_plant_errors(self, workdir):
        base, root = workdir
        result = invoke([*base_args(base, root), "curate", "--plant", "banana"])
        assert result.exit_code != 0


class TestHelpAndFlags:
    def test_help_lists_all_subcommands(self):
        result = invoke(["--help"])
        for sub in ("curate", "optimize", "finetune", "progressive", "zeroshot",
                    "predict", "evaluate", "report", "matrix"):
            assert sub in result.output

    def test_subcommand_help_lists_flags(self):
        result = invoke(["curate", "--help"])
        for flag in ("--plant", "--per-class", "--resolutions"):
            assert flag in result.output

    def test_unknown_flag_is_error(self):
        result = CliRunner().invoke(main, ["curate", "--frobnicate"])
        assert result.exit_code != 0


class TestMatrixCli:
    def test_zero_shot_only_creates_no_jobs(self, curated_cli):
        base, root = curated_cli
        args = [*base_args(base, root, run="zs-run")]
        assert invoke([*args, "curate", "--per-class", "25"]).exit_code == 0
        result = invoke([*args, "matrix", "--regimes", "zero_shot"])
        assert result.exit_code == 0, result.output
        journal = Journal(RunPaths(base / "zs-run").journal_path)
        assert journal.entries == {}
        predictions = list((base / "zs-run" / "predictions").glob("*.jsonl"))
        assert len(predictions) == 6

    def test_full_matrix_and_report(self, curated_cli):
        base, root = curated_cli
        args = [*base_args(base, root, run="matrix-run")]
        assert invoke([*args, "curate", "--per-class", "25"]).exit_code == 0
        result = invoke([*args, "matrix"])
        assert result.exit_code == 0, result.output
        result = invoke([*args, "report"])
        assert result.exit_code == 0, result.output
        reports = base / "matrix-run" / "reports"
        for name in ("finetune_ledger", "fewshot_results", "progressive_ledger",
                     "progressive_results", "zeroshot_results", "cross_resolution", "cross_plant"):
            assert (reports / f"{name}.csv").exists()
        assert (reports / "summary.md").exists()

    def test_predict_limit_one_prints_single_record(self, curated_cli):
        base, root = curated_cli
        args = [*base_args(base, root)]
        result = invoke([*args, "predict", "--model", "mock-base", "--test", "corn/256", "--limit", "1"])
        assert result.exit_code == 0, result.output
        lines = [l for l in result.output.splitlines() if l.startswith("{")]
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert set(record) == {"sample_id", "true_label", "raw_text", "parsed_category",
                               "latency_s", "cost_usd"}

    def test_bad_test_spec_errors(self, curated_cli):
        base, root = curated_cli
        result = invoke([*base_args(base, root), "predict", "--model", "m", "--test", "nope"])
        assert result.exit_code != 0

    def test_report_with_no_sweeps_errors(self, workdir, tmp_path):
        result = invoke(["--run-dir", str(tmp_path / "void"), "report"])
        assert result.exit_code != 0
        assert "nothing to report" in result.stderr


class TestOptimizeCli:
    def test_study_writes_artifacts_and_finetune_consumes_best(self, curated_cli):
        base, root = curated_cli
        args = [*base_args(base, root, run="opt-run")]
        assert invoke([*args, "curate", "--per-class", "25"]).exit_code == 0
        result = invoke([*args, "optimize", "--plant", "apple", "--resolution", "256",
                         "--n-trials", "8"])
        assert result.exit_code == 0, result.output
        studies = base / "opt-run" / "studies"
        assert (studies / "apple-256.study.jsonl").exists()
        assert (studies / "apple-256.summary.csv").exists()
        best = json.loads((studies / "apple-256.best.json").read_text())
        assert {"params", "objective"} <= set(best)
        assert len((studies / "apple-256.study.jsonl").read_text().splitlines()) == 8

        result = invoke([*args, "finetune", "--plants", "apple", "--resolutions", "256"])
        assert result.exit_code == 0, result.output
        journal = Journal(RunPaths(base / "opt-run").journal_path)
        entry = journal.completed("apple-256-full", None)
        assert entry is not None
        assert entry.hp.epochs == best["params"]["epochs"]


class TestEvaluateCli:
    def test_metrics_json_and_heatmaps(self, curated_cli):
        base, root = curated_cli
        args = [*base_args(base, root, run="matrix-run")]
        result = invoke([*args, "evaluate"])
        assert result.exit_code == 0, result.output
        metrics = list((base / "matrix-run" / "predictions").glob("*.metrics.json"))
        assert metrics
        payload = json.loads(metrics[0].read_text())
        assert {"accuracy", "precision", "recall", "f1"} <= set(payload)


class TestConfig:
    def test_precedence_flags_env_file(self, tmp_path):
        config_file = tmp_path / "leafbench.toml"
        config_file.write_text('seed = 7\nbackend = "mock"\nper_class = 50\n')
        config = load_config(config_file, env={})
        assert (config.seed, config.per_class) == (7, 50)
        config = load_config(config_file, env={"LEAFBENCH_SEED": "9"})
        assert config.seed == 9
        config = load_config(config_file, env={"LEAFBENCH_SEED": "9"}, overrides={"seed": 11})
        assert config.seed == 11

    def test_config_env_var_points_to_file(self, tmp_path):
        config_file = tmp_path / "c.toml"
        config_file.write_text("seed = 123\n")
        config = load_config(None, env={"LEAFBENCH_CONFIG": str(config_file)})
        assert config.seed == 123

    def test_unknown_key_rejected(self, tmp_path):
        config_file = tmp_path / "c.toml"
        config_file.write_text("sneed = 1\n")
        with pytest.raises(LeafbenchError, match="sneed"):
            load_config(config_file, env={})

    def test_defaults(self):
        config = load_config(None, env={})
        assert config.seed == 42
        assert config.n_trials == 30
        assert set(config.resolutions) <= {100, 150, 256}

    def test_make_backend_validation(self):
        config = RunConfig(backend="remote")
        with pytest.raises(LeafbenchError, match="remote_base_url"):
            make_backend(config)
        config = RunConfig(backend="subprocess")
        with pytest.raises(LeafbenchError, match="worker_cmd"):
            make_backend(config)
        assert make_backend(RunConfig(backend="mock")).name == "mock"
