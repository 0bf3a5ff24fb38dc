"""Experiment configuration: one JSON document holding every knob, with defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .fusion import FusionConfig
from .ingest import ConfigError
from .keyenc import KeyEncoderConfig
from .keygen import KeyGenConfig
from .synth import SynthSpec

METHODS = ("static", "finetune", "retrain", "giram", "giram-nogkr", "giram-nocs")


@dataclass
class DataConfig:
    path: str | None = None  # check-in CSV; synthetic data when unset
    category_map: str | None = None
    n_blocks: int = 5
    min_count: int = 10
    interval_days: int = 7
    grid_rows: int = 100
    grid_cols: int = 100
    last_only: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    methods: list[str] = field(default_factory=lambda: ["static", "finetune", "retrain", "giram"])
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    keyenc: KeyEncoderConfig = field(default_factory=KeyEncoderConfig)
    keygen: KeyGenConfig = field(default_factory=KeyGenConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    capacity: int = 100
    rrf_a: float = 50.0
    output_dir: str = "runs/default"
    checkpoint: bool = True

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if not self.methods:
            raise ConfigError("no methods selected")
        if self.capacity < 1:
            raise ConfigError("memory capacity must be >= 1")
        if self.rrf_a <= 0:
            raise ConfigError("rrf_a must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        body = self.to_dict()
        body.pop("output_dir")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        sections = {"data": DataConfig, "synth": SynthSpec, "backbone": BackboneConfig,
                    "keyenc": KeyEncoderConfig, "keygen": KeyGenConfig, "fusion": FusionConfig}
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if key in sections:
                sub = sections[key]
                allowed = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                if key == "keyenc" and "freqs" in value:
                    value = {**value, "freqs": tuple(value["freqs"])}
                try:
                    kwargs[key] = sub(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{key}]: {exc}") from None
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)
