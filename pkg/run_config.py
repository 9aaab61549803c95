#!/usr/bin/env python3
"""
run_config.py - JSON run configuration, defaults and presets.

A run configuration is one JSON document with the sections
schema_version, network, outer_loop, solver, sweep and run. Missing keys take
the defaults of the corresponding dataclasses; unknown keys are rejected with
the line on which they appear.

Features:
- Line-anchored errors for unknown keys, bad values and JSON syntax
- Transmit power as P_dB (default 20 dB) or linear P, never both
- strict_group_count accepted as an alias of group_assignment
- Named presets that reproduce the published sweep and convergence setups
- Worker count resolution: command line, then CMLL_THREADS, then the file

Dependencies:
    - numpy, scipy, pandas, tqdm (through the simulator modules)
"""

import os
import re
import json
import copy
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from barrier_solver import SolverSettings
from errors import ConfigError
from experiments import DEFAULT_SCHEMES, SWEEP_PARAMS, SweepSpec
from network_model import NetworkConfig, SCHEME_TAGS, db_to_linear
from transmission_schemes import OuterLoopSettings

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "default_config.json"
THREADS_ENV = "CMLL_THREADS"
DEFAULT_P_DB = 20.0
SECTIONS = ("schema_version", "network", "outer_loop", "solver", "sweep", "run")

NETWORK_KEYS = tuple(f.name for f in fields(NetworkConfig)) + ("P_dB", "strict_group_count")
OUTER_LOOP_KEYS = tuple(f.name for f in fields(OuterLoopSettings))
SOLVER_KEYS = tuple(f.name for f in fields(SolverSettings))

PRESETS: Dict[str, Dict[str, Dict[str, object]]] = {
    "fig2": {
        "network": {"K_U": 3, "S": 1.5, "P_dB": 20.0, "C": 2.0, "N_t": 1},
        "run": {"scheme": "fcbt", "seeds": [0, 1, 2]},
    },
    "fig3": {
        "network": {"K_U": 3, "S": 1.5, "P_dB": 20.0, "C": 2.0, "N_t": 1},
        "run": {"scheme": "pcpt", "seeds": [0, 1, 2]},
    },
    "fig4": {
        "network": {"S": 1.5, "P_dB": 20.0, "C": 2.0, "K_U": 6, "G": 3, "N_t": 1},
        "sweep": {"param": "xi", "grid": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
                  "schemes": ["fcbt", "pcbt", "pcpt", "tswc"]},
    },
    "fig5": {
        "network": {"S": 1.2, "P_dB": 20.0, "K_U": 6, "N_t": 4},
        "sweep": {"param": "C", "grid": [1.0, 1.5, 2.0, 2.5, 3.0],
                  "schemes": ["fcbt", "pcbt", "pcpt", "tswc"]},
    },
    "fig6": {
        "network": {"C": 1.5, "P_dB": 20.0, "K_U": 6, "N_t": 4},
        "sweep": {"param": "S", "grid": [0.8, 1.2, 1.6, 2.0],
                  "schemes": ["fcbt", "pcbt", "pcpt", "tswc", "jceo"]},
    },
}


@dataclass(frozen=True)
class SweepDefaults:
    """The sweep section: which parameter, over what grid, how many trials."""

    param: str = "xi"
    grid: Tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    trials: int = 20
    base_seed: int = 0
    schemes: Tuple[str, ...] = DEFAULT_SCHEMES

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"sweep.param must be one of {SWEEP_PARAMS}, got '{self.param}'", key="param")
        object.__setattr__(self, "grid", tuple(float(v) for v in self.grid))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if int(self.trials) != self.trials or self.trials < 1:
            raise ConfigError(f"sweep.trials must be an integer >= 1, got {self.trials}", key="trials")
        if int(self.base_seed) != self.base_seed or self.base_seed < 0:
            raise ConfigError(f"sweep.base_seed must be an integer >= 0, got {self.base_seed}", key="base_seed")
        _check_schemes(self.schemes)


@dataclass(frozen=True)
class RunSettings:
    """The run section: single-solve and convergence defaults plus output location."""

    scheme: str = "fcbt"
    seed: int = 0
    seeds: Tuple[int, ...] = (0, 1, 2)
    out_dir: str = "results"
    threads: Optional[int] = None

    def __post_init__(self):
        _check_schemes((self.scheme,))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if int(self.seed) != self.seed or self.seed < 0 or any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be integers >= 0", key="seed")
        if self.threads is not None and (int(self.threads) != self.threads or self.threads < 1):
            raise ConfigError(f"run.threads must be an integer >= 1, got {self.threads}", key="threads")


SECTION_TYPES = {
    "outer_loop": OuterLoopSettings,
    "solver": SolverSettings,
    "sweep": SweepDefaults,
    "run": RunSettings,
}
SECTION_KEYS = {
    "network": NETWORK_KEYS,
    "outer_loop": OUTER_LOOP_KEYS,
    "solver": SOLVER_KEYS,
    "sweep": tuple(f.name for f in fields(SweepDefaults)),
    "run": tuple(f.name for f in fields(RunSettings)),
}


@dataclass(frozen=True)
class RunConfig:
    """A fully validated run configuration."""

    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(P=db_to_linear(DEFAULT_P_DB)))
    outer_loop: OuterLoopSettings = field(default_factory=OuterLoopSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    sweep: SweepDefaults = field(default_factory=SweepDefaults)
    run: RunSettings = field(default_factory=RunSettings)
    source: str = "<defaults>"
    preset: Optional[str] = None

    def sweep_spec(self, param: Optional[str] = None, grid: Optional[Sequence[float]] = None,
                   trials: Optional[int] = None, base_seed: Optional[int] = None,
                   schemes: Optional[Sequence[str]] = None) -> SweepSpec:
        """SweepSpec from this config, with command-line values taking precedence."""
        return SweepSpec(
            param=param or self.sweep.param,
            grid=tuple(self.sweep.grid if grid is None else grid),
            config=self.network,
            trials=self.sweep.trials if trials is None else trials,
            base_seed=self.sweep.base_seed if base_seed is None else base_seed,
            schemes=tuple(schemes or self.sweep.schemes),
            outer=self.outer_loop,
            solver=self.solver,
        )


def _check_schemes(schemes: Sequence[str]) -> None:
    unknown = [s for s in schemes if s not in SCHEME_TAGS]
    if unknown:
        raise ConfigError(f"unknown scheme(s) {', '.join(unknown)}; choose from {', '.join(SCHEME_TAGS)}",
                          key="schemes")
    if not schemes:
        raise ConfigError("at least one scheme is required", key="schemes")


def _line_of(text: str, key: Optional[str], section: Optional[str] = None) -> Optional[int]:
    """1-based line of the first '"key":' in text, searched after the section header when given."""
    if not text or not key:
        return None
    start = 0
    if section:
        header = re.search(rf'"{re.escape(section)}"\s*:', text)
        if header:
            start = header.end()
    match = re.compile(rf'"{re.escape(key)}"\s*:').search(text, start)
    if match is None:
        return None
    return text.count("\n", 0, match.start()) + 1


def _merge(base: Dict[str, object], overrides: Dict[str, object]) -> Dict[str, object]:
    merged = copy.deepcopy(base)
    for section, values in overrides.items():
        if isinstance(values, dict):
            target = dict(merged.get(section) or {})
            if section == "network":
                # A preset power in one unit replaces the file's power in the other.
                if "P_dB" in values:
                    target.pop("P", None)
                if "P" in values:
                    target.pop("P_dB", None)
            target.update(values)
            merged[section] = target
        else:
            merged[section] = values
    return merged


def _network_config(values: Dict[str, object]) -> NetworkConfig:
    kwargs = dict(values)
    if "P" in kwargs and "P_dB" in kwargs:
        raise ConfigError("network.P and network.P_dB are mutually exclusive", key="P_dB")
    if "P" not in kwargs:
        kwargs["P"] = db_to_linear(float(kwargs.pop("P_dB", DEFAULT_P_DB)))
    if "strict_group_count" in kwargs:
        strict = kwargs.pop("strict_group_count")
        if "group_assignment" in kwargs:
            raise ConfigError("give group_assignment or strict_group_count, not both", key="strict_group_count")
        if not isinstance(strict, bool):
            raise ConfigError("strict_group_count must be true or false", key="strict_group_count")
        kwargs["group_assignment"] = "redraw" if strict else "free"
    return NetworkConfig(**kwargs)


def _build_section(name: str, values: Dict[str, object]):
    if name == "network":
        return _network_config(values)
    return SECTION_TYPES[name](**values)


def parse_run_config(document: Dict[str, object], text: str = "", source: str = "<string>",
                     preset: Optional[str] = None) -> RunConfig:
    """
    Validate a decoded configuration document.

    Args:
        document: Decoded JSON object
        text: Raw document text, used only to locate keys for error messages
        source: Name of the document for logs
        preset: Optional preset name applied on top of the document

    Returns:
        RunConfig

    Raises:
        ConfigError: unknown section or key, bad value, or unknown preset
    """
    if not isinstance(document, dict):
        raise ConfigError("configuration must be a JSON object", line=1)
    for section in document:
        if section not in SECTIONS:
            raise ConfigError(f"unknown section '{section}'", key=section, line=_line_of(text, section))
    version = document.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version}", key="schema_version",
                          line=_line_of(text, "schema_version"))

    for section, allowed in SECTION_KEYS.items():
        values = document.get(section, {})
        if not isinstance(values, dict):
            raise ConfigError(f"section '{section}' must be an object", key=section,
                              line=_line_of(text, section))
        for key in values:
            if key not in allowed:
                raise ConfigError(f"unknown key '{key}' in section '{section}'", key=key,
                                  line=_line_of(text, key, section))

    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})", key="preset")
        logger.info(f"Applying preset {preset}")
        document = _merge(document, PRESETS[preset])
        # Preset lines do not exist in the file.
        text = ""

    built = {}
    for section in SECTION_KEYS:
        values = document.get(section, {})
        try:
            built[section] = _build_section(section, values)
        except ConfigError as e:
            line = e.line if e.line is not None else _line_of(text, e.key, section)
            raise ConfigError(f"{section}: {e.args[0]}", key=e.key, line=line) from e
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}: {e}", key=section, line=_line_of(text, section)) from e

    logger.debug(f"Loaded configuration from {source}")
    return RunConfig(
        network=built["network"],
        outer_loop=built["outer_loop"],
        solver=built["solver"],
        sweep=built["sweep"],
        run=built["run"],
        source=source,
        preset=preset,
    )


def load_run_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None) -> RunConfig:
    """
    Load and validate a configuration file; the bundled default_config.json when path is None.

    Raises:
        ConfigError: unreadable file, JSON syntax error (with line) or invalid content
    """
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read configuration {path}: {e}") from e
    return load_config_text(text, source=str(path), preset=preset)


def load_config_text(text: str, source: str = "<string>", preset: Optional[str] = None) -> RunConfig:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    return parse_run_config(document, text=text, source=source, preset=preset)


def resolve_threads(cli_threads: Optional[int], config: Optional[RunConfig] = None) -> int:
    """Worker count: --threads, then the CMLL_THREADS variable, then run.threads, then 1."""
    if cli_threads is not None:
        value, origin = cli_threads, "--threads"
    elif os.environ.get(THREADS_ENV):
        value, origin = os.environ[THREADS_ENV], THREADS_ENV
    elif config is not None and config.run.threads is not None:
        value, origin = config.run.threads, "run.threads"
    else:
        return 1
    try:
        threads = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{origin} must be an integer, got '{value}'", key="threads")
    if threads < 1:
        raise ConfigError(f"{origin} must be >= 1, got {threads}", key="threads")
    return threads


def parse_grid(text: str) -> Tuple[float, ...]:
    """Comma-separated grid such as '0,0.25,0.5'; an empty string gives an empty grid."""
    items = [item.strip() for item in text.split(",") if item.strip()]
    try:
        return tuple(float(item) for item in items)
    except ValueError:
        raise ConfigError(f"grid values must be numbers, got '{text}'", key="grid")


def parse_seeds(text: str) -> List[int]:
    """Seeds as '0,1,2' or a range 'a-b' (inclusive)."""
    text = text.strip()
    try:
        if re.fullmatch(r"\d+-\d+", text):
            low, high = (int(v) for v in text.split("-"))
            return list(range(low, high + 1))
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(f"seeds must be integers, got '{text}'", key="seeds")


def parse_schemes(text: str) -> Tuple[str, ...]:
    schemes = tuple(item.strip().lower() for item in text.split(",") if item.strip())
    _check_schemes(schemes)
    return schemes
