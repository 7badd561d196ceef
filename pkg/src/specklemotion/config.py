"""Pipeline configuration and the key-value text format used for config files.

A config file holds one ``key = value`` (or ``key: value``) pair per line.
Blank lines and ``#`` comments are ignored. The same format is used for
scenario parameter files consumed by the simulator.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

# config-file key -> attribute name, where they differ
_ALIASES = {"lambda": "lam", "l": "embed_dim"}


@dataclass(frozen=True)
class PipelineConfig:
    patch_size: int = 11
    embed_dim: int = 5
    subsample_stride: int = 8
    neighborhood_radius: int = 1
    lam: float = 1.0
    epsilon: float = 1e-8
    max_iters: int = 100
    tol: float = 1e-6
    seed: int = 0
    bandwidth_mult: float = 1.0
    slope_weight: float = 0.01
    center_embedding: bool = True
    temporal: bool = True
    threads: int = 1
    dense_eig_limit: int = 2000
    previews: bool = True
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if not 1 <= self.embed_dim <= self.patch_size ** 2:
            raise ConfigError(f"embed_dim must lie in [1, patch_size**2], got {self.embed_dim}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.subsample_stride < 1 or self.neighborhood_radius < 1:
            raise ConfigError("subsample_stride and neighborhood_radius must be >= 1")
        if self.slope_weight < 0:
            raise ConfigError("slope_weight must be >= 0")
        if self.bandwidth_mult <= 0:
            raise ConfigError("bandwidth_mult must be > 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def k(self) -> int:
        return self.patch_size ** 2

    @property
    def radius(self) -> int:
        return self.patch_size // 2

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(cls) if f.name != "extra"}
        kwargs: dict[str, Any] = {}
        extra: dict[str, Any] = {}
        for key, raw in values.items():
            name = _ALIASES.get(key, key)
            if name in types:
                kwargs[name] = coerce(raw, types[name])
            else:
                extra[key] = raw
        return cls(**kwargs, extra=extra)

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping[str, Any] | None = None) -> "PipelineConfig":
        values = read_kv(path)
        values.update(overrides or {})
        return cls.from_mapping(values)


def coerce(raw: Any, type_name: Any) -> Any:
    """Convert a raw string from a config file to the annotated field type."""
    if not isinstance(raw, str):
        return raw
    type_name = str(type_name)
    text = raw.strip()
    try:
        if type_name == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {type_name}") from None
    return text


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_kv(values: Mapping[str, Any]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    """Parse ``key=value`` command-line overrides."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
