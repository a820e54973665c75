"""Tree-structured Parzen Estimator hyperparameter search, from scratch.

The sampler models two densities over the search space, one fitted to the
high-performing fraction of past trials and one to the rest, and proposes the
candidate maximizing their ratio. Validation accuracy is the objective and is
maximized throughout. A median rule prunes underperforming trials early.

Numeric parameters get one Gaussian component per observation plus a flat
prior component spanning the domain; log-uniform parameters are fitted and
sampled in log space. Categorical parameters use Laplace-smoothed counts.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import StudyError

Params = dict[str, object]

# Documented defaults; the generator count and split quantile are study-level
# knobs, all overridable through TPEConfig.
DEFAULT_GAMMA = 0.25
DEFAULT_N_STARTUP = 5
DEFAULT_N_CANDIDATES = 24
DEFAULT_PRUNE_MIN_TRIALS = 3
DEFAULT_PRUNE_WARMUP = 2


@dataclass(frozen=True)
class IntUniform:
    """Integer drawn uniformly from [low, high], inclusive."""

    low: int
    high: int

    def __post_init__(self):
        if self.low >= self.high:
            raise ValueError(f"IntUniform needs low < high, got [{self.low}, {self.high}]")

    def contains(self, value) -> bool:
        return isinstance(value, (int, np.integer)) and self.low <= value <= self.high


@dataclass(frozen=True)
class FloatUniform:
    """Float drawn uniformly from [low, high]. Used by synthetic benchmarks."""

    low: float
    high: float

    def __post_init__(self):
        if self.low >= self.high:
            raise ValueError(f"FloatUniform needs low < high, got [{self.low}, {self.high}]")

    def contains(self, value) -> bool:
        return isinstance(value, (float, int, np.floating)) and self.low <= value <= self.high


@dataclass(frozen=True)
class LogUniform:
    """Float whose logarithm is uniform on [log low, log high]."""

    low: float
    high: float

    def __post_init__(self):
        if self.low <= 0:
            raise ValueError("LogUniform needs positive bounds")
        if self.low >= self.high:
            raise ValueError(f"LogUniform needs low < high, got [{self.low}, {self.high}]")

    def contains(self, value) -> bool:
        return isinstance(value, (float, int, np.floating)) and self.low <= value <= self.high


@dataclass(frozen=True)
class Categorical:
    """Choice from a finite unordered set."""

    choices: tuple

    def __post_init__(self):
        if not self.choices:
            raise ValueError("Categorical needs at least one choice")

    def contains(self, value) -> bool:
        return value in self.choices


Distribution = IntUniform | FloatUniform | LogUniform | Categorical


@dataclass(frozen=True)
class SearchSpace:
    params: dict[str, Distribution]

    def __post_init__(self):
        if not self.params:
            raise ValueError("empty search space")

    def contains(self, params: Params) -> bool:
        return set(params) == set(self.params) and all(
            dist.contains(params[name]) for name, dist in self.params.items()
        )


def default_search_space() -> SearchSpace:
    """Epochs 3..15, batch size {8, 16, 32}, learning rate 1e-5..1e-2."""
    return SearchSpace(
        params={
            "epochs": IntUniform(3, 15),
            "batch_size": Categorical((8, 16, 32)),
            "learning_rate": LogUniform(1e-5, 1e-2),
        }
    )


class TrialState(str, Enum):
    COMPLETE = "complete"
    PRUNED = "pruned"
    FAILED = "failed"


@dataclass(frozen=True)
class TrialRecord:
    trial_id: int
    params: Params
    objective: float | None
    intermediate: tuple[float, ...] = ()
    state: TrialState = TrialState.COMPLETE
    wall_time_s: float = 0.0

    def __post_init__(self):
        if self.state is TrialState.COMPLETE and self.objective is None:
            raise ValueError("complete trial needs an objective")
        if self.state is TrialState.PRUNED and not self.intermediate:
            raise ValueError("pruned trial needs at least one intermediate value")

    @classmethod
    def complete(cls, objective: float, intermediate: Sequence[float] = ()) -> "TrialRecord":
        return cls(trial_id=-1, params={}, objective=float(objective),
                   intermediate=tuple(intermediate), state=TrialState.COMPLETE)

    @classmethod
    def pruned(cls, intermediate: Sequence[float]) -> "TrialRecord":
        return cls(trial_id=-1, params={}, objective=None,
                   intermediate=tuple(intermediate), state=TrialState.PRUNED)

    @classmethod
    def failed(cls, intermediate: Sequence[float] = ()) -> "TrialRecord":
        return cls(trial_id=-1, params={}, objective=None,
                   intermediate=tuple(intermediate), state=TrialState.FAILED)


@dataclass
class TrialHistory:
    records: list[TrialRecord] = field(default_factory=list)
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")

    def complete_records(self) -> list[TrialRecord]:
        return [r for r in self.records if r.state is TrialState.COMPLETE]

    @property
    def y_best(self) -> float | None:
        done = self.complete_records()
        return max(r.objective for r in done) if done else None

    def best_trial(self) -> TrialRecord | None:
        done = self.complete_records()
        if not done:
            return None
        return max(done, key=lambda r: (r.objective, -r.trial_id))


def split_good_bad(history: TrialHistory) -> tuple[list[TrialRecord], list[TrialRecord]]:
    """Top ceil(gamma * n) complete records by objective; ties go to earlier trials."""
    done = history.complete_records()
    if not done:
        raise StudyError("cannot split an empty history")
    n_good = math.ceil(history.gamma * len(done))
    ranked = sorted(done, key=lambda r: (-r.objective, r.trial_id))
    good = sorted(ranked[:n_good], key=lambda r: r.trial_id)
    bad = sorted(ranked[n_good:], key=lambda r: r.trial_id)
    return good, bad


class _NumericParzen:
    """Gaussian mixture over one numeric parameter, in (possibly log) domain units."""

    def __init__(self, dist: IntUniform | FloatUniform | LogUniform, observations: Sequence[float]):
        self._dist = dist
        self._log = isinstance(dist, LogUniform)
        self._int = isinstance(dist, IntUniform)
        lo, hi = float(dist.low), float(dist.high)
        if self._log:
            lo, hi = math.log(lo), math.log(hi)
        self._lo, self._hi = lo, hi
        width = hi - lo
        obs = np.asarray([math.log(v) if self._log else float(v) for v in observations])
        if obs.size == 0:
            bandwidths = np.asarray([])
        elif obs.size == 1:
            bandwidths = np.asarray([width])
        else:
            gaps = np.abs(obs[:, None] - obs[None, :])
            np.fill_diagonal(gaps, np.inf)
            bandwidths = np.maximum(gaps.min(axis=1), width / 100.0)
        # Flat-ish prior component spanning the domain keeps every in-domain
        # point reachable and the density strictly positive.
        self._centers = np.append(obs, (lo + hi) / 2.0)
        self._bandwidths = np.append(bandwidths, width)

    def logpdf(self, value) -> float:
        x = math.log(value) if self._log else float(value)
        z = (x - self._centers) / self._bandwidths
        comp = -0.5 * z * z - np.log(self._bandwidths) - 0.5 * math.log(2 * math.pi)
        peak = comp.max()
        return float(peak + math.log(np.exp(comp - peak).mean()))

    def sample(self, rng: np.random.Generator):
        for _ in range(100):
            i = rng.integers(len(self._centers))
            x = rng.normal(self._centers[i], self._bandwidths[i])
            if self._lo <= x <= self._hi:
                break
        else:
            x = min(max(x, self._lo), self._hi)
        if self._log:
            x = math.exp(x)
        if self._int:
            return int(min(max(round(x), self._dist.low), self._dist.high))
        return float(x)


class _CategoricalParzen:
    """Laplace-smoothed category weights: (count + 1) / (n + k)."""

    def __init__(self, dist: Categorical, observations: Sequence[object]):
        counts = {c: 1 for c in dist.choices}
        for v in observations:
            counts[v] += 1
        total = sum(counts.values())
        self._choices = dist.choices
        self._weights = np.asarray([counts[c] / total for c in dist.choices])

    def logpdf(self, value) -> float:
        return float(math.log(self._weights[self._choices.index(value)]))

    def sample(self, rng: np.random.Generator):
        i = rng.choice(len(self._choices), p=self._weights)
        return self._choices[i]


@dataclass(frozen=True)
class DensityEstimate:
    """Per-parameter Parzen mixtures with independent-product semantics."""

    estimators: Mapping[str, _NumericParzen | _CategoricalParzen]

    def logpdf(self, params: Params) -> float:
        return sum(est.logpdf(params[name]) for name, est in self.estimators.items())

    def sample(self, rng: np.random.Generator) -> Params:
        return {name: est.sample(rng) for name, est in self.estimators.items()}


@dataclass(frozen=True)
class AcquisitionScore:
    params: Params
    score: float


def fit_parzen(records: Sequence[TrialRecord], space: SearchSpace) -> DensityEstimate:
    """Density over the space fitted to the given records (prior-only when empty)."""
    estimators: dict[str, _NumericParzen | _CategoricalParzen] = {}
    for name, dist in space.params.items():
        observations = [r.params[name] for r in records]
        if isinstance(dist, Categorical):
            estimators[name] = _CategoricalParzen(dist, observations)
        else:
            estimators[name] = _NumericParzen(dist, observations)
    return DensityEstimate(estimators=estimators)


def sample_prior(space: SearchSpace, rng_seed: int | np.random.SeedSequence) -> Params:
    """One independent draw from each parameter's declared distribution."""
    rng = np.random.default_rng(rng_seed)
    out: Params = {}
    for name, dist in space.params.items():
        if isinstance(dist, Categorical):
            out[name] = dist.choices[rng.integers(len(dist.choices))]
        elif isinstance(dist, IntUniform):
            out[name] = int(rng.integers(dist.low, dist.high + 1))
        elif isinstance(dist, LogUniform):
            out[name] = float(math.exp(rng.uniform(math.log(dist.low), math.log(dist.high))))
        else:
            out[name] = float(rng.uniform(dist.low, dist.high))
    return out


def suggest_scored(
    history: TrialHistory,
    space: SearchSpace,
    n_candidates: int = DEFAULT_N_CANDIDATES,
    rng_seed: int | np.random.SeedSequence = 0,
    n_startup: int = DEFAULT_N_STARTUP,
) -> AcquisitionScore:
    """Next candidate and its good/bad density-ratio score.

    Before ``n_startup`` trials complete the candidate is a prior draw
    (score 0 by convention). Afterwards ``n_candidates`` draws from the good
    density are ranked by log l(x) - log g(x); ties keep the lowest index.
    """
    if len(history.complete_records()) < n_startup:
        return AcquisitionScore(params=sample_prior(space, rng_seed), score=0.0)
    good, bad = split_good_bad(history)
    l_density = fit_parzen(good, space)
    g_density = fit_parzen(bad, space)
    rng = np.random.default_rng(rng_seed)
    best: AcquisitionScore | None = None
    for _ in range(max(1, n_candidates)):
        candidate = l_density.sample(rng)
        score = l_density.logpdf(candidate) - g_density.logpdf(candidate)
        if best is None or score > best.score:
            best = AcquisitionScore(params=candidate, score=score)
    return best


def suggest(
    history: TrialHistory,
    space: SearchSpace,
    n_candidates: int = DEFAULT_N_CANDIDATES,
    rng_seed: int | np.random.SeedSequence = 0,
    n_startup: int = DEFAULT_N_STARTUP,
) -> Params:
    return suggest_scored(history, space, n_candidates, rng_seed, n_startup).params


def should_prune(
    trial: TrialRecord,
    history: TrialHistory,
    epoch: int,
    min_trials: int = DEFAULT_PRUNE_MIN_TRIALS,
    warmup: int = DEFAULT_PRUNE_WARMUP,
) -> bool:
    """Median rule: prune when strictly below the median of completed trials at ``epoch``.

    ``epoch`` indexes the intermediate list (0-based). No pruning before
    ``warmup`` epochs or before ``min_trials`` completed trials report a
    value at the same epoch.
    """
    if epoch >= len(trial.intermediate):
        raise StudyError(f"trial has no intermediate value at epoch {epoch}")
    if epoch < warmup:
        return False
    peers = [
        r.intermediate[epoch]
        for r in history.complete_records()
        if len(r.intermediate) > epoch
    ]
    if len(peers) < min_trials:
        return False
    return trial.intermediate[epoch] < statistics.median(peers)


@dataclass(frozen=True)
class TPEConfig:
    gamma: float = DEFAULT_GAMMA
    n_startup: int = DEFAULT_N_STARTUP
    n_candidates: int = DEFAULT_N_CANDIDATES
    prune_min_trials: int = DEFAULT_PRUNE_MIN_TRIALS
    prune_warmup: int = DEFAULT_PRUNE_WARMUP


class TrialProbe:
    """Intermediate-value reporter handed to the objective callback.

    The callback reports the per-epoch objective through :meth:`report` and
    may consult :meth:`should_prune` to stop early; the accumulated values
    become the trial's intermediate list.
    """

    def __init__(self, history: TrialHistory, config: TPEConfig):
        self._history = history
        self._config = config
        self.values: list[float] = []

    def report(self, value: float) -> None:
        self.values.append(float(value))

    def should_prune(self) -> bool:
        if not self.values:
            return False
        probe_trial = TrialRecord.pruned(self.values)
        return should_prune(
            probe_trial,
            self._history,
            epoch=len(self.values) - 1,
            min_trials=self._config.prune_min_trials,
            warmup=self._config.prune_warmup,
        )


Objective = Callable[[Params, TrialProbe], TrialRecord]


def objective_from_function(fn: Callable[[Params], float]) -> Objective:
    """Adapt a plain params -> objective function to the study callback shape."""

    def objective(params: Params, probe: TrialProbe) -> TrialRecord:
        return TrialRecord.complete(fn(params))

    return objective


def run_study(
    objective: Objective,
    space: SearchSpace,
    n_trials: int = 30,
    seed: int = 0,
    config: TPEConfig = TPEConfig(),
    ledger_path: Path | str | None = None,
    summary_path: Path | str | None = None,
) -> tuple[TrialRecord, TrialHistory]:
    """Sequential study: suggest, evaluate, record, repeat.

    Exceptions from the objective mark the trial failed and the study moves
    on; a study where nothing completes raises :class:`StudyError` carrying
    the history. Per-trial RNG streams derive from ``(seed, trial_id)``.
    """
    if n_trials < 1:
        raise StudyError("n_trials must be >= 1")
    history = TrialHistory(gamma=config.gamma)
    ledger = open(ledger_path, "a", encoding="utf-8") if ledger_path else None
    try:
        for trial_id in range(n_trials):
            params = suggest(
                history,
                space,
                n_candidates=config.n_candidates,
                rng_seed=np.random.SeedSequence((seed, trial_id)),
                n_startup=config.n_startup,
            )
            probe = TrialProbe(history, config)
            started = time.monotonic()
            try:
                record = objective(params, probe)
            except Exception:
                record = TrialRecord.failed(probe.values)
            record = replace(
                record,
                trial_id=trial_id,
                params=params,
                wall_time_s=time.monotonic() - started,
            )
            history.records.append(record)
            if ledger:
                ledger.write(json.dumps({
                    "trial_id": record.trial_id,
                    "params": record.params,
                    "intermediate": list(record.intermediate),
                    "objective": record.objective,
                    "state": record.state.value,
                    "wall_time_s": round(record.wall_time_s, 6),
                }) + "\n")
                ledger.flush()
    finally:
        if ledger:
            ledger.close()
    best = history.best_trial()
    if best is None:
        raise StudyError("all trials failed or were pruned", history=history)
    if summary_path:
        _write_summary(summary_path, best, history)
    return best, history


def _write_summary(path: Path | str, best: TrialRecord, history: TrialHistory) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    param_names = sorted(best.params)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_id", "objective", "n_trials", "n_complete", *param_names])
        writer.writerow(
            [best.trial_id, best.objective, len(history.records),
             len(history.complete_records()), *[best.params[k] for k in param_names]]
        )
