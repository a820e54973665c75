from __future__ import annotations

import math
import statistics

import numpy as np
import pytest

from leafbench import tpe
from leafbench.errors import StudyError


def make_history(objectives, gamma=0.25, params_fn=None, intermediates=None):
    history = tpe.TrialHistory(gamma=gamma)
    for i, objective in enumerate(objectives):
        history.records.append(
            tpe.TrialRecord(
                trial_id=i,
                params=params_fn(i) if params_fn else {"x": 0.5},
                objective=objective,
                intermediate=tuple(intermediates[i]) if intermediates else (),
                state=tpe.TrialState.COMPLETE,
            )
        )
    return history


class TestDistributions:
    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            tpe.IntUniform(5, 5)
        with pytest.raises(ValueError):
            tpe.LogUniform(0.0, 1.0)
        with pytest.raises(ValueError):
            tpe.Categorical(())

    def test_default_space_contains_selected_configuration(self):
        # the reference selected point: 10 epochs, batch 16 (interior), any lr in range
        space = tpe.default_search_space()
        assert space.contains({"epochs": 10, "batch_size": 16, "learning_rate": 3.16e-4})


class TestSamplePrior:
    def test_singleton_categorical(self):
        space = tpe.SearchSpace(params={"batch_size": tpe.Categorical((16,))})
        assert all(tpe.sample_prior(space, s)["batch_size"] == 16 for s in range(50))

    def test_log_uniform_median(self):
        space = tpe.SearchSpace(params={"lr": tpe.LogUniform(1e-5, 1e-2)})
        rng_values = [tpe.sample_prior(space, s)["lr"] for s in range(10_000)]
        assert all(1e-5 <= v <= 1e-2 for v in rng_values)
        geometric_mean = math.sqrt(1e-5 * 1e-2)  # closed-form log-uniform median
        median = statistics.median(rng_values)
        assert geometric_mean / 3 <= median <= geometric_mean * 3

    def test_fixed_seed_identical(self):
        space = tpe.default_search_space()
        assert tpe.sample_prior(space, 99) == tpe.sample_prior(space, 99)


class TestSplitGoodBad:
    def test_ceiling_arithmetic(self):
        history = make_history([i / 20 for i in range(20)], gamma=0.25)
        good, bad = tpe.split_good_bad(history)
        assert len(good) == 5 and len(bad) == 15

    def test_ties_break_to_earlier_trials(self):
        history = make_history([0.5] * 8, gamma=0.25)
        good, _ = tpe.split_good_bad(history)
        assert sorted(r.trial_id for r in good) == [0, 1]

    def test_empty_history_rejected(self):
        with pytest.raises(StudyError):
            tpe.split_good_bad(tpe.TrialHistory())

    def test_matches_counting_oracle_on_random_histories(self):
        # Oracle: a record is good iff the number of records strictly better
        # than it (higher objective, or equal objective with lower trial id)
        # is below ceil(gamma * n). Independent of any sort call.
        rng = np.random.default_rng(123)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            gamma = float(rng.uniform(0.05, 1.0))
            objectives = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=n)  # duplicates stress ties
            history = make_history(list(objectives), gamma=gamma)
            n_good = math.ceil(gamma * n)
            expected_good = set()
            for r in history.records:
                better = sum(
                    1
                    for other in history.records
                    if other.objective > r.objective
                    or (other.objective == r.objective and other.trial_id < r.trial_id)
                )
                if better < n_good:
                    expected_good.add(r.trial_id)
            good, bad = tpe.split_good_bad(history)
            assert {r.trial_id for r in good} == expected_good
            assert {r.trial_id for r in bad} == {r.trial_id for r in history.records} - expected_good

    def test_good_min_at_least_bad_max_modulo_ties(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            history = make_history(list(rng.random(15)), gamma=0.3)
            good, bad = tpe.split_good_bad(history)
            if bad:
                assert min(r.objective for r in good) >= max(r.objective for r in bad)


class TestFitParzen:
    def test_empty_records_is_prior_density(self):
        space = tpe.SearchSpace(params={"x": tpe.FloatUniform(0.0, 1.0)})
        density = tpe.fit_parzen([], space)
        est = density.estimators["x"]
        # single component at the domain midpoint, bandwidth = domain width
        expected = -0.5 * ((0.3 - 0.5) / 1.0) ** 2 - math.log(1.0) - 0.5 * math.log(2 * math.pi)
        assert density.logpdf({"x": 0.3}) == pytest.approx(expected)
        rng = np.random.default_rng(0)
        assert all(0.0 <= est.sample(rng) <= 1.0 for _ in range(500))

    def test_single_observation_density_peaks_there(self):
        space = tpe.SearchSpace(params={"x": tpe.FloatUniform(0.0, 1.0)})
        record = tpe.TrialRecord(0, {"x": 0.5}, 1.0)
        density = tpe.fit_parzen([record], space)
        grid = np.linspace(0.0, 1.0, 201)
        values = [density.logpdf({"x": float(g)}) for g in grid]
        argmax = float(grid[int(np.argmax(values))])
        assert abs(argmax - 0.5) <= 1.0  # within one bandwidth (width for lone obs)
        assert abs(argmax - 0.5) < 0.1  # and in practice right on top of it

    def test_categorical_laplace_weights(self):
        space = tpe.SearchSpace(params={"batch": tpe.Categorical((16, 32))})
        records = [
            tpe.TrialRecord(i, {"batch": b}, 1.0) for i, b in enumerate([16, 16, 16, 32])
        ]
        density = tpe.fit_parzen(records, space)
        assert math.exp(density.logpdf({"batch": 16})) == pytest.approx(4 / 6)
        assert math.exp(density.logpdf({"batch": 32})) == pytest.approx(2 / 6)

    def test_density_strictly_positive_over_domain(self):
        space = tpe.default_search_space()
        records = [
            tpe.TrialRecord(0, {"epochs": 10, "batch_size": 16, "learning_rate": 1e-3}, 1.0)
        ]
        density = tpe.fit_parzen(records, space)
        for epochs in (3, 9, 15):
            for lr in (1e-5, 3e-4, 1e-2):
                assert math.isfinite(density.logpdf({"epochs": epochs, "batch_size": 8, "learning_rate": lr}))


class TestSuggest:
    def test_startup_returns_prior_sample(self):
        space = tpe.default_search_space()
        assert tpe.suggest(tpe.TrialHistory(), space, rng_seed=5) == tpe.sample_prior(space, 5)

    def test_prefers_good_cluster(self):
        space = tpe.SearchSpace(params={"epochs": tpe.IntUniform(3, 15)})
        objectives = [1.0] * 5 + [0.0] * 15
        epochs = [10] * 5 + [3, 4, 5] * 5
        history = make_history(objectives, gamma=0.25, params_fn=lambda i: {"epochs": epochs[i]})
        hits = sum(tpe.suggest(history, space, rng_seed=s)["epochs"] == 10 for s in range(1000))
        assert hits >= 950

    def test_single_candidate_returned_regardless_of_score(self):
        space = tpe.SearchSpace(params={"x": tpe.FloatUniform(0.0, 1.0)})
        history = make_history(list(np.linspace(0, 1, 12)), params_fn=lambda i: {"x": i / 12})
        good, _ = tpe.split_good_bad(history)
        l_density = tpe.fit_parzen(good, space)
        expected = l_density.sample(np.random.default_rng(17))
        assert tpe.suggest(history, space, n_candidates=1, rng_seed=17) == expected

    def test_domain_closure_fuzzed(self):
        rng = np.random.default_rng(0)
        space = tpe.default_search_space()
        for seed in range(150):
            n = int(rng.integers(0, 25))
            history = make_history(
                list(rng.random(n)),
                params_fn=lambda i: tpe.sample_prior(space, 1000 + i),
            )
            params = tpe.suggest(history, space, rng_seed=seed)
            assert space.contains(params), params

    def test_deterministic(self):
        space = tpe.default_search_space()
        history = make_history(
            list(np.linspace(0, 1, 9)), params_fn=lambda i: tpe.sample_prior(space, i)
        )
        assert tpe.suggest(history, space, rng_seed=3) == tpe.suggest(history, space, rng_seed=3)

    def test_score_finite(self):
        space = tpe.default_search_space()
        history = make_history(
            list(np.linspace(0, 1, 9)), params_fn=lambda i: tpe.sample_prior(space, i)
        )
        scored = tpe.suggest_scored(history, space, rng_seed=3)
        assert math.isfinite(scored.score)

    def test_gamma_one_equals_parzen_sampling(self):
        # With every record "good" and a single candidate, suggesting is
        # exactly sampling from the all-observations Parzen density.
        space = tpe.SearchSpace(params={"x": tpe.FloatUniform(0.0, 1.0)})
        observations = [0.2, 0.21, 0.8, 0.5, 0.55, 0.79]
        history = make_history(
            [0.5] * 6, gamma=1.0, params_fn=lambda i: {"x": observations[i]}
        )
        density = tpe.fit_parzen(history.records, space)
        suggested = [tpe.suggest(history, space, n_candidates=1, rng_seed=s)["x"] for s in range(2000)]
        direct = [density.sample(np.random.default_rng(s))["x"] for s in range(2000)]
        assert suggested == direct  # same seed stream, same draw
        hist_a, _ = np.histogram(suggested, bins=10, range=(0, 1))
        hist_b, _ = np.histogram(
            [density.sample(np.random.default_rng(10_000 + s))["x"] for s in range(2000)],
            bins=10, range=(0, 1),
        )
        assert np.abs(hist_a - hist_b).max() <= 120  # coarse histogram agreement


class TestShouldPrune:
    def test_first_trial_never_pruned(self):
        trial = tpe.TrialRecord.pruned([0.0, 0.0, 0.0])
        assert tpe.should_prune(trial, tpe.TrialHistory(), epoch=2) is False

    def test_hand_computed_table(self):
        intermediates = [
            [0.5, 0.6, 0.7],
            [0.4, 0.5, 0.6],
            [0.6, 0.7, 0.8],
            [0.3, 0.4, 0.9],
            [0.7, 0.8, 0.95],
        ]
        history = make_history([0.7, 0.6, 0.8, 0.9, 0.95], intermediates=intermediates)
        # medians per epoch: 0.5, 0.6, 0.8
        below = tpe.TrialRecord.pruned([0.45, 0.55, 0.75])
        assert tpe.should_prune(below, history, epoch=0) is False  # below median but inside warmup
        assert tpe.should_prune(below, history, epoch=1) is False
        assert tpe.should_prune(below, history, epoch=2) is True

    def test_exactly_at_median_not_pruned(self):
        intermediates = [[0.5] * 3] * 5
        history = make_history([0.5] * 5, intermediates=intermediates)
        at_median = tpe.TrialRecord.pruned([0.5, 0.5, 0.5])
        assert tpe.should_prune(at_median, history, epoch=2) is False

    def test_min_trials_gate(self):
        history = make_history([0.9, 0.9], intermediates=[[0.9] * 3] * 2)
        trial = tpe.TrialRecord.pruned([0.0, 0.0, 0.0])
        assert tpe.should_prune(trial, history, epoch=2) is False

    def test_missing_epoch_rejected(self):
        trial = tpe.TrialRecord.pruned([0.5])
        with pytest.raises(StudyError):
            tpe.should_prune(trial, tpe.TrialHistory(), epoch=3)


def quadratic_space():
    return tpe.SearchSpace(params={"x": tpe.FloatUniform(0.0, 1.0)})


def grid_optimum(fn, low=0.0, high=1.0, points=10_001) -> float:
    grid = np.linspace(low, high, points)
    return float(grid[int(np.argmax([fn(x) for x in grid]))])


def two_basin(x: float, y: float) -> float:
    near = math.exp(-((x - 0.2) ** 2 + (y - 0.8) ** 2) / 0.02)
    far = math.exp(-((x - 0.75) ** 2 + (y - 0.25) ** 2) / 0.02)
    return 0.7 * near + 1.0 * far


class TestRunStudy:
    def test_constant_objective_full_history(self, tmp_path):
        ledger = tmp_path / "study.jsonl"
        best, history = tpe.run_study(
            tpe.objective_from_function(lambda p: 0.5),
            quadratic_space(),
            n_trials=30,
            seed=0,
            ledger_path=ledger,
            summary_path=tmp_path / "summary.csv",
        )
        assert len(history.records) == 30
        assert best.objective == 0.5
        assert len(ledger.read_text().splitlines()) == 30
        assert (tmp_path / "summary.csv").exists()

    def test_quadratic_benchmark_beats_random(self):
        target = grid_optimum(lambda x: -((x - 0.7) ** 2))
        fn = lambda p: -((p["x"] - target) ** 2)
        space = quadratic_space()
        tpe_best, hits = [], 0
        for seed in range(20):
            best, _ = tpe.run_study(tpe.objective_from_function(fn), space, n_trials=30, seed=seed)
            tpe_best.append(best.objective)
            hits += abs(best.params["x"] - target) <= 0.1
        random_best = []
        for seed in range(20):
            draws = [tpe.sample_prior(space, (seed + 1) * 10_000 + t) for t in range(30)]
            random_best.append(max(fn(p) for p in draws))
        assert hits >= 16  # >= 80% of studies within 10% of domain width
        assert statistics.median(tpe_best) >= statistics.median(random_best)

    def test_two_basin_benchmark_beats_random(self):
        space = tpe.SearchSpace(
            params={"x": tpe.FloatUniform(0.0, 1.0), "y": tpe.FloatUniform(0.0, 1.0)}
        )
        fn = lambda p: two_basin(p["x"], p["y"])
        tpe_best, random_best = [], []
        for seed in range(20):
            best, _ = tpe.run_study(tpe.objective_from_function(fn), space, n_trials=30, seed=seed)
            tpe_best.append(best.objective)
            draws = [tpe.sample_prior(space, (seed + 1) * 20_000 + t) for t in range(30)]
            random_best.append(max(fn(p) for p in draws))
        assert statistics.median(tpe_best) >= statistics.median(random_best)

    def test_failed_trials_recorded_and_study_survives(self):
        calls = {"n": 0}

        def objective(params, probe):
            calls["n"] += 1
            if calls["n"] % 3 == 0:
                raise RuntimeError("boom")
            return tpe.TrialRecord.complete(params["x"])

        best, history = tpe.run_study(objective, quadratic_space(), n_trials=12, seed=1)
        failed = [r for r in history.records if r.state is tpe.TrialState.FAILED]
        assert len(failed) == 4
        assert best.state is tpe.TrialState.COMPLETE

    def test_all_failed_raises_with_history(self):
        def objective(params, probe):
            raise RuntimeError("always")

        with pytest.raises(StudyError) as excinfo:
            tpe.run_study(objective, quadratic_space(), n_trials=5, seed=0)
        assert len(excinfo.value.history.records) == 5

    def test_pruning_inside_study(self):
        # scripted per-trial targets: weak trials arrive after strong ones and
        # must be cut at the first post-warmup epoch below the running median
        targets = [0.9, 0.9, 0.9, 0.2, 0.9, 0.2, 0.2, 0.9]
        counter = iter(range(len(targets)))

        def objective(params, probe):
            target = targets[next(counter)]
            for epoch in range(5):
                probe.report(target * (epoch + 1) / 5)
                if probe.should_prune():
                    return tpe.TrialRecord.pruned(probe.values)
            return tpe.TrialRecord.complete(target, probe.values)

        _, history = tpe.run_study(objective, quadratic_space(), n_trials=8, seed=3)
        states = [r.state for r in history.records]
        assert states[3] is tpe.TrialState.PRUNED
        assert states[5] is tpe.TrialState.PRUNED and states[6] is tpe.TrialState.PRUNED
        assert states[7] is tpe.TrialState.COMPLETE
        # pruned at the first epoch past warmup (index 2), with >=1 intermediate
        assert len(history.records[3].intermediate) == 3

    def test_y_best_tracks_max(self):
        history = make_history([0.3, 0.9, 0.5])
        assert history.y_best == 0.9
        assert history.best_trial().trial_id == 1
