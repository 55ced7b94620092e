"""Run configuration: one TOML file with a section per stage, strict keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from typing import Any

from .aligner import AlignmentConfig
from .errors import BadConfig
from .neural.model import ModelConfig
from .neural.train import TrainConfig
from .scene_raster import RasterConfig
from .synthgen import ScenarioConfig
from .trajectory_signal import DetectorConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class DatasetConfig:
    val_frac: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.val_frac < 1.0:
            raise BadConfig("val_frac must lie in (0, 1)")


@dataclass(frozen=True)
class EnsembleConfig:
    variants: tuple = ("mixed", "uniform")
    top_k: int = 2
    offset_weights: dict = field(default_factory=lambda: {"offset": 0.5, "overall": 0.3, "duration": 0.1})
    duration_weights: dict = field(default_factory=lambda: {"duration": 0.5, "overall": 0.3, "offset": 0.1})

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        if not self.variants or self.top_k < 1:
            raise BadConfig("ensemble needs at least one variant and top_k >= 1")

    def weights(self) -> dict:
        return {"offset": dict(self.offset_weights), "duration": dict(self.duration_weights)}


@dataclass(frozen=True)
class WorkloadConfig:
    window_s: float = 300.0


SECTIONS = {
    "synth": ScenarioConfig,
    "detect": DetectorConfig,
    "align": AlignmentConfig,
    "raster": RasterConfig,
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "ensemble": EnsembleConfig,
    "workload": WorkloadConfig,
}
# seeds are derived from the top-level seed only
_RESERVED = {"seed", "airport"}


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    synth: ScenarioConfig = field(default_factory=ScenarioConfig)
    detect: DetectorConfig = field(default_factory=DetectorConfig)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)

    def __post_init__(self):
        if self.threads < 1:
            raise BadConfig("threads must be >= 1")
        self.synth = dataclasses.replace(self.synth, seed=self.seed)
        self.train = dataclasses.replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed, "threads": self.threads}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            for k in _RESERVED:
                d.pop(k, None)
            out[name] = _jsonable(d)
        return out

    def hash(self) -> str:
        # thread count does not affect results, so it is left out of the hash
        d = self.to_dict()
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({**self.to_dict(), "config_hash": self.hash()}, fh, indent=1, sort_keys=True)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build_section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise BadConfig(f"[{name}] must be a table")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)} - _RESERVED
    unknown = set(values) - names
    if unknown:
        raise BadConfig(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    kw = {}
    for k, v in values.items():
        cur = getattr(defaults, k)
        if isinstance(cur, dict):
            if not isinstance(v, dict) or set(v) - set(cur):
                raise BadConfig(f"[{name}].{k} accepts keys {sorted(cur)}")
            v = {**cur, **v}
        elif isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return dataclasses.replace(defaults, **kw)
    except (TypeError, ValueError) as exc:
        raise BadConfig(f"[{name}]: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(SECTIONS) - {"seed", "threads", "config_hash"}
    if unknown:
        raise BadConfig(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    kw = {name: _build_section(name, cls, d[name]) for name, cls in SECTIONS.items() if name in d}
    for k in ("seed", "threads"):
        if k in d:
            if not isinstance(d[k], int) or isinstance(d[k], bool):
                raise BadConfig(f"{k} must be an integer")
            kw[k] = d[k]
    return RunConfig(**kw)


def load_config(path=None, seed: int | None = None, threads: int | None = None) -> RunConfig:
    """TOML file (optional) with CLI overrides applied on top."""
    d: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                d = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise BadConfig(f"{path}: {exc}") from exc
    if seed is not None:
        d["seed"] = seed
    if threads is not None:
        d["threads"] = threads
    return config_from_dict(d)
