"""Flat ``key = value`` config files shared by the topology and cost model.

Floats are written with ``repr`` so a dump/load cycle is bit-exact.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Union

Value = Union[int, float, str]


class ConfigError(ValueError):
    pass


def parse(text: str) -> dict[str, Value]:
    out: dict[str, Value] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _coerce(val)
    return out


def _coerce(val: str) -> Value:
    try:
        return int(val)
    except ValueError:
        pass
    try:
        return float(val)
    except ValueError:
        return val


def dump(values: Mapping[str, Value], header: str = "") -> str:
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    for key, val in values.items():
        lines.append(f"{key} = {val!r}" if isinstance(val, float) else f"{key} = {val}")
    return "\n".join(lines) + "\n"


def load(path: Union[str, Path]) -> dict[str, Value]:
    return parse(Path(path).read_text())


def header_comments(text: str) -> list[str]:
    """Leading ``#`` comment lines, stripped of the marker."""
    out = []
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        out.append(line[1:].strip())
    return out
