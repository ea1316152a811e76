"""Flat ``key = value`` configuration files with dotted sections.

Example::

    # gauss2d, EMD pairing
    lr = 1e-3
    pairing = "emd"
    objective.hj = "pushforward"
    objective.k = 4
    model.hidden_width = 64

Values are JSON literals (numbers, ``true``/``false``, quoted strings, lists);
bare words are read as strings. Unknown keys and type mismatches are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from pathlib import Path

from .sample import SamplerConfig
from .train import TrainConfig

_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")
_BARE = re.compile(r"^[A-Za-z_][\w\-]*$")


@dataclasses.dataclass
class BenchConfig:
    dim: int = 16
    seed: int = 0


KINDS = {"train": TrainConfig, "sample": SamplerConfig, "bench": BenchConfig}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, path=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.key = key
        self.line = line


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _unflatten(flat: dict) -> dict:
    nested: dict = {}
    for key, v in flat.items():
        node = nested
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = v
    return nested


def _strip_comment(text: str) -> str:
    out, quote = [], None
    for ch in text:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def _literal(raw: str):
    if len(raw) >= 2 and raw[0] == raw[-1] == "'":
        return raw[1:-1]
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if _BARE.match(raw):
            return raw
        raise


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    expected = type(default).__name__
    raise ConfigError(f"key {key!r} expects {expected}, got {type(value).__name__} {value!r}", key)


def parse_text(text: str, kind: str = "train", base=None, path=None):
    """Parse config text on top of ``base`` (defaults when None)."""
    cls = KINDS[kind]
    base = base if base is not None else cls()
    flat = flatten(base)
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = _strip_comment(raw)
        if not body:
            continue
        m = _LINE.match(body)
        if not m:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno, path=path)
        key, rawval = m.group(1), m.group(2)
        if key not in flat:
            raise ConfigError(f"unknown key {key!r}", key=key, line=lineno, path=path)
        if key in seen:
            raise ConfigError(f"key {key!r} repeats line {seen[key]}", key=key, line=lineno, path=path)
        seen[key] = lineno
        try:
            value = _literal(rawval)
        except json.JSONDecodeError:
            raise ConfigError(f"cannot read value {rawval!r} for {key!r}", key=key, line=lineno, path=path) from None
        try:
            flat[key] = _coerce(value, flat[key], key)
        except ConfigError as exc:
            raise ConfigError(str(exc), key=key, line=lineno, path=path) from None
    try:
        return cls(**_unflatten(flat))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}", path=path) from None


def parse_config(path, kind: str = "train", base=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file not found", path=path)
    return parse_text(path.read_text(encoding="utf-8"), kind, base, path)


def serialize_config(cfg) -> str:
    lines = []
    for key, v in sorted(flatten(cfg).items()):
        lines.append(f"{key} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def describe_defaults(kind: str = "train", base=None) -> str:
    base = base if base is not None else KINDS[kind]()
    return "\n".join(f"  {k} = {json.dumps(v)}" for k, v in sorted(flatten(base).items()))
