"""RunConfig: the JSON document driving the CLI.

Top-level sections ``model``, ``train`` and ``data`` mirror
:class:`ModelConfig`, :class:`TrainConfig` and the synthetic dataset fields
by name. Unknown keys are rejected at every level.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .architecture import ModelConfig
from .errors import ConfigError
from .training import SynthDataset, TrainConfig

_SECTIONS = ("model", "train", "data")


def _check_keys(d, cls_fields, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - set(cls_fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(unknown))}")


def _init_fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls) if f.init]


def model_config_from_dict(d: dict) -> ModelConfig:
    _check_keys(d, _init_fields(ModelConfig), "model")
    try:
        cfg = ModelConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_keys(self.data, _init_fields(SynthDataset), "data")

    def dataset(self) -> SynthDataset:
        return SynthDataset(**self.data)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": dict(self.data)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, _SECTIONS, "run config")
        model = model_config_from_dict(d.get("model", {}))
        train_d = d.get("train", {})
        _check_keys(train_d, _init_fields(TrainConfig), "train")
        try:
            train = TrainConfig(**train_d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        train.validate()
        return cls(model, train, dict(d.get("data", {})))

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.loads(fh.read())
