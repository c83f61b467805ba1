"""One JSON document configuring a whole run, with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .aggregation import AggregationSpec
from .dataset import DEFAULT_CLASSES_PER_SCENE, PROTOCOLS, StepSpec
from .distill import DistillConfig
from .inversion import InversionConfig
from .protocol import METHODS, RunPlan, TrainConfig, config_hash
from .segnet import Arch


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    protocol: str = "3-1"
    mode: str = "disjoint"
    train_scenes: int = 200
    test_scenes: int = 100
    canvas_size: int = 64
    classes_per_scene: dict = field(default_factory=lambda: dict(DEFAULT_CLASSES_PER_SCENE))

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; choose from {sorted(PROTOCOLS)}")
        self.classes_per_scene = {int(k): float(v) for k, v in self.classes_per_scene.items()}

    def step_spec(self):
        return StepSpec.preset(self.protocol, self.mode)


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "HRHF"
    data: DataConfig = field(default_factory=DataConfig)
    model: Arch = field(default_factory=Arch)
    initial: TrainConfig = field(default_factory=TrainConfig)
    incremental: DistillConfig = field(default_factory=DistillConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    crop: int | None = 32
    fake_factor: float = 2.0
    fake_max: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def hash(self):
        return config_hash(self.to_dict())

    def plan(self, method=None, **overrides) -> RunPlan:
        kw = dict(step_spec=self.data.step_spec(), method=method or self.method, arch=self.model,
                  initial=self.initial, incremental=self.incremental, crop=self.crop,
                  inversion=self.inversion, fake_factor=self.fake_factor,
                  fake_max=self.fake_max, seed=self.seed)
        kw.update(overrides)
        return RunPlan(**kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# nested dataclass fields and their types
_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): Arch,
    (RunConfig, "initial"): TrainConfig,
    (RunConfig, "incremental"): DistillConfig,
    (RunConfig, "inversion"): InversionConfig,
    (InversionConfig, "aggregation"): AggregationSpec,
}
_TUPLES = {(DistillConfig, "ratio"), (AggregationSpec, "r_set")}


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {path or 'config'}")
    kw = {}
    for key, val in doc.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            val = _build(sub, val, f"{path}.{key}" if path else key)
        elif (cls, key) in _TUPLES:
            val = tuple(val)
        kw[key] = val
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(doc) -> RunConfig:
    return _build(RunConfig, doc, "")


def load(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)


def desk_preset(**changes) -> RunConfig:
    """Budget settings used by the acceptance runs (32-pixel crops and inversions)."""
    cfg = RunConfig(inversion=InversionConfig(steps=100, resolution=32))
    return dataclasses.replace(cfg, **changes)
