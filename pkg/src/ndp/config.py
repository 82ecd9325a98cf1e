"""Run configuration: TOML files with a fixed canonical layout.

Canonical form (what :func:`dumps` writes and what ``loads(dumps(c)) == c``
relies on): the top-level keys ``variant, task, seed, workers, output_dir``
and optionally ``data``, then the ``[trainer]`` table, the ``[dev]`` table
and, for the evolutionary variant, the ``[fitness]`` table.  Inside each
table keys follow the dataclass field order; keys whose value is ``None``
are omitted.
"""
from __future__ import annotations

import sys
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diff import DiffDevConfig
from .envs import TASKS, FitnessSpec
from .evo import EvoDevConfig
from .trainers.evo import EvoTrainConfig
from .trainers.ppo import PpoConfig
from .trainers.supervised import BcConfig, SupervisedConfig

CONFIG_DIR = Path(__file__).parent / "configs"

# (variant, task) -> trainer config class
TRAINERS = {
    ("evo", "xor"): EvoTrainConfig,
    ("evo", "cartpole"): EvoTrainConfig,
    ("evo", "smallworld"): EvoTrainConfig,
    ("diff", "digits"): SupervisedConfig,
    ("diff", "bc"): BcConfig,
    ("diff", "cartpole"): PpoConfig,
}
TOP_KEYS = ("variant", "task", "seed", "workers", "output_dir", "data")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    variant: str
    task: str
    trainer: Any
    dev: Any
    seed: int = 0
    workers: int = 0  # 0 means "available cores, capped by population size"
    output_dir: str = "runs"
    data: str | None = None
    fitness: FitnessSpec | None = None

    @property
    def trainer_kind(self) -> str:
        return {EvoTrainConfig: "evo", SupervisedConfig: "supervised", BcConfig: "bc",
                PpoConfig: "ppo"}[type(self.trainer)]


def _check_type(section: str, key: str, value, default):
    """Match ``value`` to the type of the field default; ints are accepted for float fields.

    Fields defaulting to ``None`` are optional floats (targets and penalties).
    """
    if default is MISSING:
        return value
    if default is None:
        default = 0.0
    ok = {
        bool: lambda v: isinstance(v, bool),
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        tuple: lambda v: isinstance(v, (list, tuple)),
    }.get(type(default), lambda v: True)
    if not ok(value):
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def _section(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    data = dict(data)
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown field {key!r}; expected one of {sorted(known)}")
        data[key] = _check_type(name, key, value, known[key].default)
    try:
        obj = cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except ValueError as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return obj


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(TOP_KEYS) - {"trainer", "dev", "fitness"}
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    for key in ("variant", "task"):
        if key not in data:
            raise ConfigError(f"missing required field {key!r}")
    variant, task = data["variant"], data["task"]
    if (variant, task) not in TRAINERS:
        allowed = ", ".join(f"{v}/{t}" for v, t in TRAINERS)
        raise ConfigError(f"variant/task {variant}/{task} is not supported; choose from {allowed}")
    trainer = _section(TRAINERS[variant, task], data.get("trainer", {}), "trainer")
    if variant == "evo":
        dev = _section(EvoDevConfig, data.get("dev", {}), "dev")
        fit = dict(data.get("fitness", {}))
        fit.setdefault("task", task)
        if fit["task"] != task:
            raise ConfigError(f"[fitness] task {fit['task']!r} does not match task {task!r}")
        fitness = _section(FitnessSpec, fit, "fitness")
        try:
            dev.validate(TASKS[task]["n_in"], TASKS[task]["n_out"])
        except ValueError as exc:
            raise ConfigError(f"[dev] {exc}") from exc
    else:
        if "fitness" in data:
            raise ConfigError("[fitness] only applies to the evo variant")
        dev = _section(DiffDevConfig, data.get("dev", {}), "dev")
        fitness = None
        if task == "cartpole" and not dev.critic:
            raise ConfigError("[dev] critic: PPO on cartpole needs critic = true")
        if task in ("cartpole", "bc") and (dev.n_in, dev.n_out) != (4, 2):
            raise ConfigError(f"[dev] n_in/n_out must be 4/2 for {task}, got {dev.n_in}/{dev.n_out}")
        if task == "digits" and (dev.n_in, dev.n_out) != (64, 10):
            raise ConfigError(f"[dev] n_in/n_out must be 64/10 for digits, got {dev.n_in}/{dev.n_out}")
    if task == "bc" and not data.get("data"):
        raise ConfigError("task bc needs a 'data' path to a trajectory CSV")
    cfg = RunConfig(variant, task, trainer, dev, fitness=fitness)
    for key in ("seed", "workers", "output_dir", "data"):
        if key in data:
            expected = str if key in ("output_dir", "data") else int
            if not isinstance(data[key], expected) or isinstance(data[key], bool):
                raise ConfigError(f"{key}: expected {expected.__name__}, got {data[key]!r}")
            setattr(cfg, key, data[key])
    return cfg


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    return from_dict(data)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = loads(path.read_text(encoding="utf-8"))
    if cfg.data and not Path(cfg.data).is_absolute():
        # data paths are relative to the config file unless they already exist as given
        candidate = path.parent / cfg.data
        if not Path(cfg.data).exists() and candidate.exists():
            cfg.data = str(candidate)
    return cfg


def _clean(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if v is not None}


def to_dict(cfg: RunConfig) -> dict:
    out: dict = {"variant": cfg.variant, "task": cfg.task, "seed": cfg.seed,
                 "workers": cfg.workers, "output_dir": cfg.output_dir}
    if cfg.data is not None:
        out["data"] = cfg.data
    out["trainer"] = _clean(asdict(cfg.trainer))
    out["dev"] = _clean(asdict(cfg.dev))
    if cfg.fitness is not None:
        fit = _clean(asdict(cfg.fitness))
        fit.pop("task")
        out["fitness"] = fit
    return out


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def shipped(name: str) -> Path:
    """Path of a config bundled with the package (``xor``, ``cartpole``, ...)."""
    path = CONFIG_DIR / f"{name}.toml"
    if not path.is_file():
        raise ConfigError(f"no shipped config named {name!r}")
    return path
