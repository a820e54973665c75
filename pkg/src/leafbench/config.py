"""Run configuration: TOML file, environment overrides, flag overrides.

Precedence is flags > environment > file > defaults. Credentials are never
read from config files; the remote backend takes its bearer token from
``LEAFBENCH_API_KEY`` only.
"""

from __future__ import annotations

import dataclasses
import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .backends import Backend, MockBackend, PriceTable, RemoteBackend, SubprocessBackend
from .backends.base import HyperParams
from .errors import LeafbenchError
from .tpe import Categorical, IntUniform, LogUniform, SearchSpace

CONFIG_ENV = "LEAFBENCH_CONFIG"

# Environment variable per scalar field, applied between file and flags.
_ENV_FIELDS = {
    "LEAFBENCH_DATASET_ROOT": ("dataset_root", str),
    "LEAFBENCH_RUN_DIR": ("run_dir", str),
    "LEAFBENCH_BACKEND": ("backend", str),
    "LEAFBENCH_SEED": ("seed", int),
    "LEAFBENCH_BASE_MODEL": ("base_model", str),
    "LEAFBENCH_URL_BASE": ("url_base", str),
    "LEAFBENCH_REMOTE_BASE_URL": ("remote_base_url", str),
    "LEAFBENCH_WORKER_CMD": ("worker_cmd", str),
}

_DEFAULT_BASE_MODELS = {"mock": "mock-base", "subprocess": "resnet-50"}


@dataclass
class RunConfig:
    dataset_root: str = "data"
    run_dir: str = "runs/default"
    plants: tuple[str, ...] = ("apple", "corn")
    resolutions: tuple[int, ...] = (100, 150, 256)
    seed: int = 42
    per_class: int = 200
    url_base: str | None = None  # default: file:// URLs under dataset_root
    backend: str = "mock"
    base_model: str | None = None
    regimes: tuple[str, ...] = ("full", "progressive", "zero_shot")
    # TPE settings
    n_trials: int = 30
    gamma: float = 0.25
    n_startup: int = 5
    n_candidates: int = 24
    epochs_low: int = 3
    epochs_high: int = 15
    batch_choices: tuple[int, ...] = (8, 16, 32)
    lr_low: float = 1e-5
    lr_high: float = 1e-2
    # hyperparameters used by the full regime when no study output exists
    full_epochs: int = 10
    full_batch_size: int = 16
    # execution
    parallelism: int = 4
    poll_interval_s: float = 0.0
    strict_flagging: bool = False
    # pricing (USD per 1k tokens)
    price_train_per_1k: float = 0.025
    price_input_per_1k: float = 0.0025
    price_output_per_1k: float = 0.01
    # mock backend knobs
    mock_base_accuracy: float = 0.55
    mock_error_retention: float = 0.1
    mock_flag_modulus: int = 0  # 0 disables flagging
    mock_malformed_rate: float = 0.0
    mock_hp_penalty: float = 0.05
    # other backends
    remote_base_url: str | None = None
    worker_cmd: str | None = None

    def search_space(self) -> SearchSpace:
        return SearchSpace(
            params={
                "epochs": IntUniform(self.epochs_low, self.epochs_high),
                "batch_size": Categorical(tuple(self.batch_choices)),
                "learning_rate": LogUniform(self.lr_low, self.lr_high),
            }
        )

    def prices(self) -> PriceTable:
        return PriceTable(
            train_per_1k=self.price_train_per_1k,
            input_per_1k=self.price_input_per_1k,
            output_per_1k=self.price_output_per_1k,
        )

    def default_full_hp(self) -> HyperParams:
        return HyperParams(epochs=self.full_epochs, batch_size=self.full_batch_size)

    def resolved_base_model(self) -> str:
        if self.base_model:
            return self.base_model
        if self.backend in _DEFAULT_BASE_MODELS:
            return _DEFAULT_BASE_MODELS[self.backend]
        raise LeafbenchError(f"backend {self.backend!r} needs an explicit base model")

    def effective_url_base(self) -> str:
        if self.url_base:
            return self.url_base
        return f"file://{Path(self.dataset_root).resolve()}"


def _coerce(value, target):
    if isinstance(target, bool):
        return bool(value)
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        return tuple(type(target[0])(v) for v in value) if target else tuple(value)
    return value


def load_config(
    config_path: Path | str | None = None,
    overrides: dict | None = None,
    env: dict | None = None,
) -> RunConfig:
    env = os.environ if env is None else env
    config = RunConfig()
    path = config_path or env.get(CONFIG_ENV)
    if path:
        data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        _apply(config, data, source=str(path))
    for var, (name, cast) in _ENV_FIELDS.items():
        if var in env:
            setattr(config, name, cast(env[var]))
    if overrides:
        _apply(config, {k: v for k, v in overrides.items() if v is not None}, source="flags")
    return config


def _apply(config: RunConfig, data: dict, source: str) -> None:
    valid = {f.name: f for f in dataclasses.fields(RunConfig)}
    for key, value in data.items():
        if key not in valid:
            raise LeafbenchError(f"{source}: unknown config key {key!r}")
        current = getattr(config, key)
        setattr(config, key, _coerce(value, current) if current is not None else value)


def make_backend(config: RunConfig) -> Backend:
    if config.backend == "mock":
        flag_predicate = None
        if config.mock_flag_modulus:
            from .rng import hash_float

            modulus = config.mock_flag_modulus
            flag_predicate = lambda sid: int(hash_float("flag", sid) * modulus) == 0
        return MockBackend(
            seed=config.seed,
            base_accuracy=config.mock_base_accuracy,
            error_retention=config.mock_error_retention,
            flag_predicate=flag_predicate,
            malformed_rate=config.mock_malformed_rate,
            prices=config.prices(),
            hp_penalty=config.mock_hp_penalty,
        )
    if config.backend == "remote":
        if not config.remote_base_url:
            raise LeafbenchError("remote backend needs remote_base_url")
        return RemoteBackend(base_url=config.remote_base_url, prices=config.prices())
    if config.backend == "subprocess":
        if not config.worker_cmd:
            raise LeafbenchError("subprocess backend needs worker_cmd")
        return SubprocessBackend(worker_cmd=shlex.split(config.worker_cmd))
    raise LeafbenchError(f"unknown backend {config.backend!r}")
