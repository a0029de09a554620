"""Flat ``key = value`` run configuration with typed defaults.

Precedence: built-in defaults < config file < command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip('"').strip("'")
    return values


def resolve(options: list[Option], file_values: dict[str, str], flag_values: dict[str, Any],
            known_keys: set[str]) -> dict[str, Any]:
    """Merge defaults, file values and flags into the effective configuration.

    Keys unknown to every command are rejected; keys that belong to other
    commands are ignored so one file can serve a whole pipeline.
    """
    unknown = sorted(set(file_values) - known_keys)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    effective = {}
    for opt in options:
        value = opt.default
        if opt.name in file_values:
            try:
                value = opt.type(file_values[opt.name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {opt.name}: {exc}") from None
        if flag_values.get(opt.name) is not None:
            value = flag_values[opt.name]
        effective[opt.name] = value
    return effective


def dumps(command: str, effective: dict[str, Any]) -> str:
    lines = [f"# aescnn {command}: effective configuration"]
    lines += [f"{k} = {effective[k]}" for k in sorted(effective)]
    return "\n".join(lines) + "\n"
