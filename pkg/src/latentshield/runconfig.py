"""Flat key=value run configuration with section headers.

The format is deliberately minimal and diff-friendly:

    # comment
    [section]
    key = value

Keys flatten to "section.key". Flag values override file values, and
unknown keys are rejected before any compute. Every resolved
configuration hashes to a short stable digest that is echoed next to
the run's outputs.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

__all__ = [
    "ConfigError",
    "parse_flat_config",
    "resolve_config",
    "config_hash",
    "write_config_echo",
    "env_seed",
]

SEED_ENV_VAR = "LATENT_SHIELD_SEED"


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2 in the CLI."""


def parse_flat_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"{source}:{lineno}: empty section header")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        full = f"{section}.{key}" if section else key
        if full in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {full!r}")
        out[full] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_flat_config(p.read_text(), source=str(p))


def resolve_config(defaults: dict[str, str], file_values: dict[str, str],
                   flag_values: dict[str, str]) -> dict[str, str]:
    """defaults <- file <- flags, rejecting keys outside the declared set."""
    allowed = set(defaults)
    unknown = sorted(set(file_values) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(allowed))}")
    unknown = sorted(set(flag_values) - allowed)
    if unknown:
        raise ConfigError(f"unknown flag keys: {', '.join(unknown)}")
    resolved = dict(defaults)
    resolved.update(file_values)
    resolved.update({k: v for k, v in flag_values.items() if v is not None})
    return resolved


def config_hash(resolved: dict[str, str]) -> str:
    canon = "\n".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def write_config_echo(out_dir, resolved: dict[str, str], name: str = "resolved_config.txt") -> str:
    digest = config_hash(resolved)
    lines = ["[resolved]"]
    lines += [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    lines.append(f"config_hash = {digest}")
    path = Path(out_dir) / name
    path.write_text("\n".join(lines) + "\n")
    return digest


def env_seed(default: int = 0) -> int:
    """Global seed fallback from the environment."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc
