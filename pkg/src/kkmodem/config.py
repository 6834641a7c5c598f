"""Experiment configuration: one YAML file mapping onto nested dataclasses.

Every field has a default, so an empty file is a valid configuration; the
fully resolved configuration is written next to each result for provenance.
Dotted overrides (``link.spans=20``) address any nested field.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channel import AdcConfig, DetectorConfig, FiberSpec, LinkSpec
from .constellation import DEFAULT_FEC_THRESHOLDS, SUPPORTED_ORDERS
from .experiment import SystemSetup
from .pipeline import PipelineConfig
from .rxdsp import KkConfig
from .txdsp import TxConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TraceSettings:
    duration: float = 1e-3
    bin_duration: float = 10e-6


@dataclass(frozen=True)
class ExperimentConfig:
    format: int = 4
    distances_km: list = field(default_factory=lambda: [0.0])
    relative_powers_db: list = field(default_factory=lambda: [0.0])
    cspr_db: list = field(default_factory=lambda: [12.0])
    link: LinkSpec = field(default_factory=LinkSpec)
    tx: TxConfig = field(default_factory=TxConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    adc: AdcConfig = field(default_factory=AdcConfig)
    kk: KkConfig = field(default_factory=KkConfig)
    pipeline: PipelineConfig = field(default_factory=lambda: PipelineConfig(buffer_samples=1 << 18))
    bits_per_point: int = 1_000_000
    warmup_symbols: int = 4096
    static_fft_size: int = 4096
    mu: float = 1e-3
    mu_final: float = 2.5e-4
    mu_switch_symbols: int = 10_000
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_FEC_THRESHOLDS))
    trace: TraceSettings = field(default_factory=TraceSettings)
    output_path: str = "results"

    def __post_init__(self):
        if self.format not in SUPPORTED_ORDERS:
            raise ConfigError(f"format {self.format} not in {SUPPORTED_ORDERS}")
        for name in ("distances_km", "relative_powers_db", "cspr_db"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        if self.bits_per_point < 100_000:
            raise ConfigError(f"bits_per_point {self.bits_per_point} is below 1e5")

    @property
    def symbols_per_point(self) -> int:
        k = self.format.bit_length() - 1
        return -(-self.bits_per_point // k)

    def setup(self, distance_km: float, rel_power_db: float, cspr_db: float) -> SystemSetup:
        return SystemSetup(
            order=self.format,
            distance_km=distance_km,
            tx=dataclasses.replace(self.tx, cspr_db=cspr_db),
            link=self.link.with_offset(rel_power_db),
            detector=self.detector,
            adc=self.adc,
            kk=self.kk,
            static_fft_size=self.static_fft_size,
            mu=self.mu,
            mu_final=self.mu_final,
            mu_switch_symbols=self.mu_switch_symbols,
        )


def _hints(cls):
    return typing.get_type_hints(cls)


def _number(value, t):
    # YAML 1.1 reads exponents without a dot (1e-5) as strings
    if isinstance(value, str) and t is not str:
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, list):
        return [_number(v, None) for v in value]
    return value


def _build(cls, data, path=""):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        t = hints[key]
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(t):
            kwargs[key] = _build(t, value, sub)
        else:
            kwargs[key] = _number(value, t)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {})


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh))


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = to_dict(v) if dataclasses.is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def dump(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=False)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars or lists."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown field")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)
