"""TOML run configuration with strict key checking.

A file may hold the tables ``[run]``, ``[data]``, ``[model]``,
``[schedule]``, ``[summarizer]`` and ``[metrics]``. Unknown tables or keys
are rejected. ``run.seed``, when given, seeds every component whose own
``seed`` is left unset; ``run.threads`` likewise fills in
``summarizer.threads``.
"""

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, get_args, get_origin, get_type_hints

from .errors import ConfigError
from .summarize import SummarizerConfig
from .toy.data import SyntheticDGConfig
from .toy.train import ModelConfig, TrainSchedule

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class MetricsConfig:
    quantile: float = 0.01
    coverage_scope: str = "global"
    coverage_mode: str = "exists"
    power: float = 0.0
    projection_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError("metrics.quantile must be in (0, 1)")
        if self.coverage_scope not in ("global", "neuron"):
            raise ConfigError(f"unknown coverage_scope {self.coverage_scope!r}")
        if self.coverage_mode not in ("exists", "forall"):
            raise ConfigError(f"unknown coverage_mode {self.coverage_mode!r}")
        if self.power < 0:
            raise ConfigError("metrics.power must be >= 0")


@dataclass(frozen=True)
class RunSettings:
    seed: Optional[int] = None
    verbosity: str = "warning"
    threads: int = 1

    def __post_init__(self):
        if self.verbosity.lower() not in ("debug", "info", "warning", "error"):
            raise ConfigError(f"unknown verbosity {self.verbosity!r}")
        if self.threads < 1:
            raise ConfigError("run.threads must be >= 1")


SECTIONS = {
    "run": RunSettings,
    "data": SyntheticDGConfig,
    "model": ModelConfig,
    "schedule": TrainSchedule,
    "summarizer": SummarizerConfig,
    "metrics": MetricsConfig,
}
SEEDED = ("data", "model", "schedule", "summarizer")


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: SyntheticDGConfig = field(default_factory=SyntheticDGConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    summarizer: SummarizerConfig = field(default_factory=SummarizerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self):
        """Every resolved value, defaults included."""
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def override(self, section, **values):
        """Copy with ``values`` applied to ``section``; ``None`` values are skipped."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return replace(self, **{section: build_section(section, {
            **asdict(getattr(self, section)), **values})})


def _check_type(section, key, value, hint):
    if get_origin(hint) is not None:  # Optional[...]
        if value is None:
            return value
        hint = next(a for a in get_args(hint) if a is not type(None))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{section}.{key} must be {hint.__name__}, got {value!r}")
    return value


def build_section(section, table):
    """Instantiate one config table, rejecting unknown keys."""
    if section not in SECTIONS:
        raise ConfigError(f"unknown config table [{section}]; expected one of {sorted(SECTIONS)}")
    cls = SECTIONS[section]
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    values = {k: _check_type(section, k, v, hints[k]) for k, v in table.items()}
    return cls(**values)


def parse_config(doc):
    """Build a :class:`RunConfig` from a parsed TOML mapping."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a table")
    for name, table in doc.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config table [{name}]; expected one of {sorted(SECTIONS)}")
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
    run_seed = doc.get("run", {}).get("seed")
    run_threads = doc.get("run", {}).get("threads")
    built = {}
    for name in SECTIONS:
        table = dict(doc.get(name, {}))
        if run_seed is not None and name in SEEDED and "seed" not in table:
            table["seed"] = run_seed
        if run_threads is not None and name == "summarizer" and "threads" not in table:
            table["threads"] = run_threads
        built[name] = build_section(name, table)
    return RunConfig(**built)


def load_config(path=None):
    """Read a TOML file (or return all defaults when ``path`` is None).

    A run manifest written by the command line (``*.json``) is accepted as
    well; its resolved configuration is used verbatim.
    """
    if path is None:
        return RunConfig()
    if str(path).endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("schema") != "conceptcontrast.manifest":
            raise ConfigError(f"{path} is not a run manifest")
        return parse_config({name: {k: v for k, v in table.items() if v is not None}
                             for name, table in doc["config"].items()})
    try:
        with open(Path(path), "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)
