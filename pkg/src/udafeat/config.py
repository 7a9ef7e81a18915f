"""Experiment configuration: one JSON document covering scene generation,
domain shift, network, training and loss weights.

Every field has a default, so the empty document is a valid config; the
document round-trips losslessly through to_dict/from_dict.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .losses import LossWeights
from .segnet import SegNetConfig
from .synthdata import DomainShift, SceneSpec, default_shift
from .trainer import TrainConfig, benchmark_profile

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    schema: int = SCHEMA_VERSION
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShift = field(default_factory=default_shift)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    train: TrainConfig = field(default_factory=benchmark_profile)
    n_source: int = 500
    n_target: int = 500
    n_val: int = 100
    out: str = ""

    def __post_init__(self):
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {self.schema}")
        if self.segnet.height != self.scene.height or \
                self.segnet.width != self.scene.width:
            raise ConfigError("segnet input size must match scene size")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["weights"] = d["train"].pop("weights")
        return d

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)} | {"weights"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kwargs = {}
            for name, section_cls in (("scene", SceneSpec),
                                      ("segnet", SegNetConfig)):
                if name in doc:
                    kwargs[name] = _build(section_cls, doc[name])
            if "shift" in doc:
                kwargs["shift"] = _build(DomainShift, doc["shift"])
            train_doc = dict(doc.get("train", {}))
            weights_doc = train_doc.pop("weights", None)
            if "weights" in doc:
                weights_doc = doc["weights"]
            if weights_doc is not None:
                train_doc["weights"] = _build(LossWeights, weights_doc)
            if train_doc or "train" in doc or weights_doc is not None:
                kwargs["train"] = _build_train(train_doc)
            for name in ("schema", "n_source", "n_target", "n_val", "out"):
                if name in doc:
                    kwargs[name] = doc[name]
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(section_cls, doc):
    if not isinstance(doc, dict):
        raise ConfigError(f"section for {section_cls.__name__} must be an object")
    names = {f.name for f in dataclasses.fields(section_cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(
            f"unknown keys in {section_cls.__name__}: {sorted(unknown)}")
    doc = {k: tuple(v) if isinstance(v, list) and
           isinstance(getattr(section_cls(), k, None), tuple) else v
           for k, v in doc.items()}
    return section_cls(**doc)


def _build_train(doc):
    base = benchmark_profile()
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown keys in TrainConfig: {sorted(unknown)}")
    kwargs = {f.name: getattr(base, f.name)
              for f in dataclasses.fields(TrainConfig)}
    kwargs.update(doc)
    return TrainConfig(**kwargs)
