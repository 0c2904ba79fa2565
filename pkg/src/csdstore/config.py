"""Engine configuration and its YAML file format.

Example file (every key optional; unknown keys are rejected)::

    device:
      logical_capacity: 67108864
      entry_format: v2          # v1 | v2
      gc_segment_size: 262144
    selector:
      benefit_per_overhead_threshold: 300
    replicas: 3
    software: adaptive          # adaptive | lz4 | zstd | off
    per_page_log: true
    seed: 0
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .codec import HEAVY_UNIT_SIZE, HEAVY_ZSTD_LEVEL, SelectorConfig
from .csd import DeviceConfig, EntryFormat
from .errors import ConfigError

SOFTWARE_MODES = ("adaptive", "lz4", "zstd", "off")


@dataclass(frozen=True)
class EngineConfig:
    device: DeviceConfig = field(default_factory=DeviceConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    replicas: int = 3
    fast_log_capacity: int = 64 << 20
    log_cache_budget: int = 256 << 10
    heavy_unit_size: int = HEAVY_UNIT_SIZE
    heavy_level: int = HEAVY_ZSTD_LEVEL
    per_page_log: bool = True
    software: str = "adaptive"
    timing: bool = False
    seed: int = 0
    chunk: int = 0

    def __post_init__(self):
        if self.replicas < 1 or self.replicas % 2 == 0:
            raise ConfigError(f"replica count must be odd, got {self.replicas}")
        if self.software not in SOFTWARE_MODES:
            raise ConfigError(f"software must be one of {SOFTWARE_MODES}")
        if self.heavy_unit_size % 16384 or self.heavy_unit_size <= 0:
            raise ConfigError("heavy_unit_size must be a multiple of 16384")
        if self.log_cache_budget < 0 or self.fast_log_capacity <= 0:
            raise ConfigError("log budgets must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["device"]["entry_format"] = self.device.entry_format.name.lower()
        out["selector"]["io_latency_saving_per_4k"] = list(self.selector.io_latency_saving_per_4k)
        return out


def _build(cls, raw: dict, where: str, convert=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = dict(raw)
    if convert:
        kwargs = convert(kwargs)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _device_kwargs(kw: dict) -> dict:
    fmt = kw.get("entry_format")
    if isinstance(fmt, str):
        try:
            kw["entry_format"] = EntryFormat[fmt.upper()]
        except KeyError:
            raise ConfigError(f"entry_format must be v1 or v2, got {fmt!r}") from None
    return kw


def _selector_kwargs(kw: dict) -> dict:
    if "io_latency_saving_per_4k" in kw:
        kw["io_latency_saving_per_4k"] = tuple(kw["io_latency_saving_per_4k"])
    return kw


def config_from_dict(raw: dict | None) -> EngineConfig:
    raw = dict(raw or {})

    def convert(kw):
        if "device" in kw:
            kw["device"] = _build(DeviceConfig, kw["device"], "device", _device_kwargs)
        if "selector" in kw:
            kw["selector"] = _build(SelectorConfig, kw["selector"], "selector", _selector_kwargs)
        return kw

    return _build(EngineConfig, raw, "config", convert)


def load_config(path) -> EngineConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: EngineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def load_population(path):
    """Read a population file: ``population`` and ``scheduler`` sections."""
    from .scheduler import PopulationSpec, SchedulerConfig

    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read population {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"population {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("population file must be a mapping")
    unknown = sorted(set(raw) - {"population", "scheduler"})
    if unknown:
        raise ConfigError(f"unknown key(s) in population file: {', '.join(unknown)}")
    spec = _build(PopulationSpec, raw.get("population") or {}, "population")
    sched = _build(SchedulerConfig, raw.get("scheduler") or {}, "scheduler")
    return spec, sched
