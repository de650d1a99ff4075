"""Experiment configuration: a TOML file per experiment.

The schema is strict (unknown keys are rejected) and the parsed
configuration round-trips losslessly through ``to_toml``.  Coefficient
functions are arithmetic expression strings in (t, y) for factor models
and (t, S) for stock models.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

import numpy as np

from .errors import ConfigError
from .expr import compile_expression
from .market import (
    CompleteMarketModel, Constant, IncompleteMarketModel, PlayerType,
    SolvableExampleParams, TypeDistribution, Uniform, build_solvable_example,
)

_SCHEMA = {
    "model": {
        "family", "mu", "sigma", "b", "a", "beta", "ell", "m", "rho",
        "horizon", "y0", "s0", "y_lo", "y_hi",
    },
    "players": {"x0", "delta", "payoff", "c"},
    "types": {"x0", "delta", "c"},
    "grids": {"n_steps", "n_paths", "pde_nt", "pde_nx", "space_lo", "space_hi"},
    "run": {"seed", "out_dir", "tests", "threads", "format"},
    "tolerances": {"deviation_z", "drift_z", "identity_z"},
    "mfg": {"n_types", "type_seed", "n_list", "n_resamples", "tracked_delta",
            "tracked_c", "tracked_x0"},
}

_MARGINAL_KEYS = {"kind", "value", "lo", "hi"}

_DEFAULTS = {
    "grids": {"n_steps": 128, "n_paths": 10_000, "pde_nt": 400, "pde_nx": 400},
    "run": {"seed": 0, "out_dir": "out", "tests": [], "format": "csv"},
    "tolerances": {"deviation_z": 2.0, "drift_z": 3.0, "identity_z": 3.0},
    "mfg": {"n_types": 2, "type_seed": 10_007, "n_list": [10, 100, 1000, 10000],
            "n_resamples": 100},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``raw`` is the canonical dict."""

    raw: dict = field(repr=False)

    # -- sections ----------------------------------------------------------
    @property
    def model_section(self) -> dict:
        return self.raw["model"]

    @property
    def players_section(self) -> list[dict]:
        return self.raw.get("players", [])

    @property
    def types_section(self) -> Optional[dict]:
        return self.raw.get("types")

    def grids(self, key: str):
        return self.raw.get("grids", {}).get(key, _DEFAULTS["grids"].get(key))

    def run_option(self, key: str):
        return self.raw.get("run", {}).get(key, _DEFAULTS["run"].get(key))

    def tolerance(self, key: str) -> float:
        return float(self.raw.get("tolerances", {}).get(key, _DEFAULTS["tolerances"][key]))

    def mfg_option(self, key: str):
        return self.raw.get("mfg", {}).get(key, _DEFAULTS["mfg"].get(key))

    # -- construction ------------------------------------------------------
    def build_model(self):
        sec = self.model_section
        family = sec.get("family")
        if family == "solvable":
            params = SolvableExampleParams(
                mu=float(sec["mu"]), beta=float(sec["beta"]), ell=float(sec["ell"]),
                m=float(sec["m"]), rho=float(sec["rho"]), horizon=float(sec["horizon"]),
                y0=float(sec.get("y0", 0.5)), s0=float(sec.get("s0", 1.0)),
            )
            y_domain = (float(sec.get("y_lo", 0.01)), float(sec.get("y_hi", 4.0)))
            return build_solvable_example(params, y_domain=y_domain), params
        if family == "incomplete":
            coef = {k: _coefficient(sec, k, ("t", "y")) for k in ("mu", "sigma", "b", "a")}
            model = IncompleteMarketModel(
                mu=coef["mu"], sigma=coef["sigma"], b=coef["b"], a=coef["a"],
                rho=float(sec["rho"]), horizon=float(sec["horizon"]),
                y0=float(sec.get("y0", 0.5)), s0=float(sec.get("s0", 1.0)),
                y_domain=(float(sec.get("y_lo", 1e-6)), float(sec.get("y_hi", np.inf))),
            )
            return model, None
        if family == "complete":
            model = CompleteMarketModel(
                mu=_coefficient(sec, "mu", ("t", "S")),
                sigma=_coefficient(sec, "sigma", ("t", "S")),
                horizon=float(sec["horizon"]), s0=float(sec.get("s0", 1.0)),
            )
            return model, None
        raise ConfigError(f"unknown model family {family!r}; "
                          "expected solvable, incomplete, or complete")

    def build_players(self) -> list[PlayerType]:
        players = []
        for i, entry in enumerate(self.players_section):
            if "payoff" in entry and "delta" in entry:
                raise ConfigError(f"player {i}: give either delta or payoff, not both")
            if "payoff" in entry:
                delta = compile_expression(str(entry["payoff"]), ("S",))
            elif "delta" in entry:
                delta = float(entry["delta"])
            else:
                raise ConfigError(f"player {i}: needs delta or payoff")
            players.append(PlayerType(x0=float(entry["x0"]), delta=delta,
                                      c=float(entry["c"])))
        return players

    def build_type_distribution(self) -> Optional[TypeDistribution]:
        sec = self.types_section
        if sec is None:
            return None
        return TypeDistribution(x0=_marginal(sec, "x0"), delta=_marginal(sec, "delta"),
                                c=_marginal(sec, "c"))

    def digest(self) -> str:
        """Hex digest identifying the experiment.

        Presentation-only options (output directory, thread cap, format)
        do not change the digest; seeds and all numerical inputs do.
        """
        raw = {k: v for k, v in self.raw.items()}
        run = {k: v for k, v in raw.get("run", {}).items()
               if k not in ("out_dir", "threads", "format")}
        raw["run"] = run
        return hashlib.sha256(to_toml(ExperimentConfig(raw=raw)).encode()).hexdigest()[:16]


def _coefficient(sec: dict, key: str, variables):
    if key not in sec:
        raise ConfigError(f"model section needs {key!r}")
    value = sec[key]
    if isinstance(value, str):
        return compile_expression(value, variables)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        const = float(value)

        def fn(t, x):
            return np.full(np.broadcast_shapes(np.shape(t), np.shape(x)), const)

        fn.expression = repr(const)
        return fn
    raise ConfigError(f"model coefficient {key!r} must be a number or expression string")


def _marginal(sec: dict, key: str):
    entry = sec.get(key)
    if not isinstance(entry, dict):
        raise ConfigError(f"types.{key} must be a table like "
                          "{kind = 'constant', value = 1.0}")
    unknown = set(entry) - _MARGINAL_KEYS
    if unknown:
        raise ConfigError(f"types.{key}: unknown keys {sorted(unknown)}")
    kind = entry.get("kind")
    if kind == "constant":
        return Constant(float(entry["value"]))
    if kind == "uniform":
        return Uniform(float(entry["lo"]), float(entry["hi"]))
    raise ConfigError(f"types.{key}: unknown marginal kind {kind!r}")


def _check_keys(raw: dict) -> None:
    unknown_tables = set(raw) - set(_SCHEMA)
    if unknown_tables:
        raise ConfigError(f"unknown config sections {sorted(unknown_tables)}")
    for table, allowed in _SCHEMA.items():
        if table not in raw:
            continue
        entries = raw[table]
        if table == "players":
            if not isinstance(entries, list):
                raise ConfigError("players must be an array of tables ([[players]])")
            for i, entry in enumerate(entries):
                unknown = set(entry) - allowed
                if unknown:
                    raise ConfigError(f"players[{i}]: unknown keys {sorted(unknown)}")
        else:
            if not isinstance(entries, dict):
                raise ConfigError(f"section {table} must be a table")
            unknown = set(entries) - allowed
            if unknown:
                raise ConfigError(f"section {table}: unknown keys {sorted(unknown)}")


def parse(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment description."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    _check_keys(raw)
    if "model" not in raw:
        raise ConfigError("config needs a [model] section")
    cfg = ExperimentConfig(raw=raw)
    cfg.build_model()        # validates model parameters eagerly
    cfg.build_players()
    cfg.build_type_distribution()
    return cfg


def load(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read())


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise ConfigError(f"cannot serialize value {value!r}")


def _toml_value(value) -> str:
    if isinstance(value, dict):
        inner = ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items())
        return "{" + inner + "}"
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return _toml_scalar(value)


def to_toml(config: ExperimentConfig) -> str:
    """Canonical TOML text; parse(to_toml(c)) reproduces c exactly."""
    lines = []
    raw = config.raw
    for table in _SCHEMA:
        if table not in raw:
            continue
        entries = raw[table]
        if table == "players":
            for entry in entries:
                lines.append("[[players]]")
                for k, v in entry.items():
                    lines.append(f"{k} = {_toml_value(v)}")
                lines.append("")
        else:
            lines.append(f"[{table}]")
            for k, v in entries.items():
                lines.append(f"{k} = {_toml_value(v)}")
            lines.append("")
    return "\n".join(lines)
