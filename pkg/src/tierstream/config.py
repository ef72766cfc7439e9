"""Run configuration: one flat key-value section, loaded from an INI file.

Example::

    [tierstream]
    n_params = 64e6
    tp = 4
    engine = lazy
    staging_capacity_bytes = 256e6

Numeric values accept scientific notation; byte counts and bandwidths use
decimal units (1 MB = 1e6 B). Durations are in seconds.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

SECTION = "tierstream"


@dataclass
class SimConfig:
    # layout
    n_params: int = 64_000_000
    layers: int = 8
    hidden_dim: int = 0
    tp: int = 4
    pp: int = 1
    dp: int = 1
    zero1: bool = True
    seed: int = 0
    metadata_bytes: int = 2_000_000
    host_buffer_bytes: int = 8_000
    write_params_all_dp: bool = False
    byte_scale: int = 1000
    # engine
    engine: str = "lazy"
    lazy_serialize_overlap: bool = True
    launch_overhead: float = 0.010
    # phases, seconds
    t_forward: float = 0.030
    t_backward: float = 0.060
    t_update: float = 0.006
    # run
    n_iters: int = 15
    ckpt_interval: int = 1
    # transfer
    d2h_bandwidth: int = 16_000_000_000
    host_copy_bandwidth: int = 32_000_000_000
    flush_bandwidth: int = 1_000_000_000
    flush_workers: int = 4
    serialize_bandwidth: int = 200_000_000
    raw_chunk_bytes: int = 16_000_000
    serialized_chunk_bytes: int = 1_000_000
    alignment: int = 4096
    host_inplace: bool = False
    # staging
    staging_capacity_bytes: int = 256_000_000
    shared_cache: bool = False
    node_flush_streams: int = 0
    cache_timeout: float = 0.0
    # output
    output_dir: str = ""

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.ckpt_interval < 1:
            raise ValueError("ckpt_interval must be >= 1")
        for name in ("t_forward", "t_backward", "t_update", "launch_overhead"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_value(self) -> dict[str, Any]:
        """TLV-encodable echo of the configuration (booleans as ints)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = int(v) if isinstance(v, bool) else v
        return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind: type, raw: str):
    text = raw.strip()
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(text.replace("_", ""))
        except ValueError:
            value = float(text)
            if not value.is_integer():
                raise ValueError(f"{name}: expected an integer, got {raw!r}") from None
            return int(value)
    if kind is float:
        return float(text)
    return text


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(SimConfig)}


def from_mapping(values: dict[str, Any], base: SimConfig | None = None) -> SimConfig:
    changes = {}
    for key, raw in values.items():
        name = key.strip().lower()
        if name not in _TYPES:
            raise KeyError(f"unknown config key {key!r}")
        changes[name] = _coerce(name, _TYPES[name], raw) if isinstance(raw, str) else _TYPES[name](raw)
    return dataclasses.replace(base or SimConfig(), **changes)


def load_config(path, base: SimConfig | None = None) -> SimConfig:
    parser = configparser.ConfigParser()
    path = Path(path)
    if not parser.read(path):
        raise FileNotFoundError(f"cannot read config {path}")
    if not parser.has_section(SECTION):
        raise KeyError(f"{path}: missing [{SECTION}] section")
    return from_mapping(dict(parser.items(SECTION)), base)


def dump_config(config: SimConfig) -> str:
    lines = [f"[{SECTION}]"]
    for f in fields(config):
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
