"""Run configuration: INI files with [run] and [agent] sections.

Flat ``key = value`` pairs, parseable by configparser, diff-friendly.  Flags
override file values; the effective configuration is echoed into every run
directory and round-trips through this module.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .agent import AgentConfig
from .envs import Env


class ConfigError(ValueError):
    """Invalid run configuration; message carries file/line when known."""


@dataclass
class RunConfig:
    agent: AgentConfig
    env: str = "pendulum"
    flicker_p: float = 0.0
    total_steps: int = 10_000
    seed: int = 0
    eval_every: int = 2000
    eval_episodes: int = 20
    checkpoint_every: int = 50_000
    warmup_steps: int = 1000
    updates_per_step: float = 0.5

    def __post_init__(self) -> None:
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.eval_every <= 0 or self.eval_episodes <= 0:
            raise ConfigError("eval cadence and episode count must be positive")
        if self.updates_per_step <= 0:
            raise ConfigError("updates_per_step must be positive")
        if not 0.0 <= self.flicker_p <= 1.0:
            raise ConfigError(f"flicker_p must be in [0, 1], got {self.flicker_p}")


# Dimensions and the master seed are derived, never read from a file.
_DERIVED_AGENT_FIELDS = ("obs_dim", "action_dim", "seed")
_AGENT_FIELDS = {f.name: f for f in dataclasses.fields(AgentConfig) if f.name not in _DERIVED_AGENT_FIELDS}
_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "agent"}


def env_dims(env_name: str) -> tuple[int, int]:
    probe = Env(env_name)
    return probe.obs_dim, probe.action_dim


def _parse_tuple(raw: str) -> tuple:
    raw = raw.strip().strip("()")
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _coerce(name: str, raw: str, target_type, allow_none: bool = False) -> object:
    raw = raw.strip()
    if raw.lower() in ("none", "auto"):
        if allow_none:
            return None
        raise ConfigError(f"{name} does not accept '{raw}'")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        if target_type is tuple:
            return _parse_tuple(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _field_type(f: dataclasses.Field) -> tuple[type, bool]:
    raw = str(f.type)
    base = raw.replace(" | None", "").strip()
    t = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}.get(base, str)
    return t, "None" in raw


def read_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    """Raw section -> key -> value strings.  Parse errors keep line numbers."""
    parser = configparser.ConfigParser()
    path = Path(path)
    try:
        with open(path) as fh:
            parser.read_file(fh, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        out[section] = dict(parser.items(section))
    return out


def _line_of(path: Path, key: str) -> int | None:
    try:
        for i, line in enumerate(path.read_text().splitlines(), start=1):
            if line.strip().lower().startswith(key.lower()):
                return i
    except OSError:
        pass
    return None


def build_run_config(config_file: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Assemble a RunConfig from an optional file plus flag overrides.

    Override keys use the run-field names plus agent-field names; both are
    flat since the two namespaces do not collide.
    """
    overrides = dict(overrides or {})
    run_kwargs: dict = {}
    agent_kwargs: dict = {}

    if config_file is not None:
        path = Path(config_file)
        sections = read_config_file(path)
        for section, items in sections.items():
            if section not in ("run", "agent"):
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in items.items():
                target = _RUN_FIELDS if section == "run" else _AGENT_FIELDS
                if key not in target:
                    line = _line_of(path, key)
                    where = f"{path}:{line}: " if line else f"{path}: "
                    raise ConfigError(f"{where}unknown [{section}] key '{key}'")
                try:
                    ftype, allow_none = _field_type(target[key])
                    value = _coerce(key, raw, ftype, allow_none)
                except ConfigError as exc:
                    line = _line_of(path, key)
                    where = f"{path}:{line}: " if line else f"{path}: "
                    raise ConfigError(where + str(exc)) from exc
                (run_kwargs if section == "run" else agent_kwargs)[key] = value

    for key, value in overrides.items():
        if value is None:
            continue
        if key in _RUN_FIELDS:
            run_kwargs[key] = value
        elif key in _AGENT_FIELDS:
            agent_kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key '{key}'")

    env_name = run_kwargs.get("env", "pendulum")
    try:
        obs_dim, action_dim = env_dims(env_name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seed = int(run_kwargs.get("seed", 0))
    try:
        agent_cfg = AgentConfig(obs_dim=obs_dim, action_dim=action_dim, seed=seed, **agent_kwargs)
        return RunConfig(agent=agent_cfg, **run_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def write_config(cfg: RunConfig, path: str | Path) -> None:
    """Echo the effective configuration; re-parsing reproduces it exactly."""
    parser = configparser.ConfigParser()
    parser["run"] = {}
    for name in _RUN_FIELDS:
        parser["run"][name] = _format_value(getattr(cfg, name))
    parser["agent"] = {}
    for name in _AGENT_FIELDS:
        parser["agent"][name] = _format_value(getattr(cfg.agent, name))
    with open(path, "w") as fh:
        parser.write(fh)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
