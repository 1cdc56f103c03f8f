"""JSON run configuration: sections {data, augment, backbone, protoclr,
finetune, eval} mirroring the module configs, with strict unknown-key
rejection and a generated defaults document.

Precedence everywhere is flags > config file > defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataSection:
    kind: str = "synthetic"  # "synthetic" or "directory"
    root: str = ""  # directory layout root (kind="directory")
    image_size: int = 16
    channels: int = 1
    split_file: str = ""  # optional class-name list
    n_classes: int = 8  # synthetic only
    n_per_class: int = 64  # synthetic only
    noise_std: float = 0.05  # synthetic only
    class_offset: int = 0  # synthetic template family offset
    restrict_classes: int = 0  # 0 = no restriction
    restrict_images: int = 0
    seed: int = 0


@dataclass
class AugmentSection:
    preset: str = "synthetic"  # omniglot | mini | cdfsl | synthetic | identity
    transforms: list = field(default_factory=list)  # custom pipeline spec (overrides preset)


@dataclass
class BackboneSection:
    input_channels: int = 1
    input_size: int = 16
    seed: int = 0


@dataclass
class ProtoCLRSection:
    batch_size: int = 50
    n_queries: int = 3
    lr: float = 0.001
    lr_decay_factor: float = 0.5
    lr_decay_period: int = 25000
    max_iterations: int = 10000
    patience: int = 20000
    accuracy_window: int = 100
    checkpoint_interval: int = 500
    epoch_shuffle: bool = False
    seed: int = 0


@dataclass
class FineTuneSection:
    epochs: int = 15
    batch_size: int = 5
    lr: float = 0.001
    scope: str = "head"


@dataclass
class EvalSection:
    n_ways: int = 5
    k_shots: int = 1
    q_queries: int = 15
    n_episodes: int = 600
    adaptor: str = "prototune"
    seed: int = 0
    threads: int = 1


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    protoclr: ProtoCLRSection = field(default_factory=ProtoCLRSection)
    finetune: FineTuneSection = field(default_factory=FineTuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "data": DataSection,
    "augment": AugmentSection,
    "backbone": BackboneSection,
    "protoclr": ProtoCLRSection,
    "finetune": FineTuneSection,
    "eval": EvalSection,
}


def _build_section(cls, payload: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        spec = fields[name]
        if spec.type in ("int", int) and isinstance(value, bool):
            raise ConfigError(f"{section}.{name}: expected int, got bool")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"section {section!r}: {e}") from e


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(payload).__name__}")
    unknown = sorted(set(payload) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        sub = payload.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"section {name!r} must be a JSON object")
        kwargs[name] = _build_section(cls, sub, name)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    return config_from_dict(payload)


def default_config() -> RunConfig:
    return RunConfig()


def defaults_json(indent: int = 2) -> str:
    """The generated defaults document; feeding it back is a no-op."""
    return json.dumps(default_config().to_dict(), indent=indent, sort_keys=True)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-path overrides ('protoclr.batch_size') in place."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, name = dotted.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"bad override target {dotted!r}")
        target = getattr(config, section)
        if not hasattr(target, name):
            raise ConfigError(f"unknown key(s) in section {section!r}: {name}")
        setattr(target, name, value)
    return config
