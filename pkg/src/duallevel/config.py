"""Run configuration: one JSON document, validated strictly.

Unknown keys anywhere are errors so that an ablation can never silently run
with a misspelled field. ``RunConfig.to_dict()`` round-trips through
``RunConfig.from_dict()``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from duallevel.bank import BankUpdatePolicy
from duallevel.regen import InteractionStrategy
from duallevel.synthdata import DomainSpec


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    n_source: int = 200
    n_target: int = 200
    source: DomainSpec = field(default_factory=DomainSpec)
    target: DomainSpec = field(
        default_factory=lambda: DomainSpec().shifted(offset=[0.08, 0.02, -0.06], gain=[0.85, 1.05, 1.10], noise_std=0.04)
    )


@dataclass
class ModelConfig:
    patch: int = 3
    raw_dim: int = 64
    embed_dim: int = 16
    proj_scale: float = 4.0
    init_scale: float = 0.5


@dataclass
class AugmentConfig:
    weak_gain: float = 0.03
    weak_offset: float = 0.02
    strong_gain: float = 0.20
    strong_offset: float = 0.10
    strong_noise: float = 0.03
    strong_blur: float = 1.0


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    lr: float = 1.0
    eval_every: int = 250
    lambda_ins: float = 1.0
    tau: float = 0.968
    tp: float = 0.1
    regenerate: bool = True
    ins_reduction: str = "mean"
    soft_target: bool = False
    gate_on: str = "z_hat"
    bank_seed_images: int = 4

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not self.tp > 0:
            raise ConfigError("tp must be positive")
        if self.lambda_ins < 0:
            raise ConfigError("lambda_ins must be >= 0")
        if self.ins_reduction not in ("mean", "sum"):
            raise ConfigError("ins_reduction must be 'mean' or 'sum'")
        if self.gate_on not in ("z_hat", "z"):
            raise ConfigError("gate_on must be 'z_hat' or 'z'")
        if self.bank_seed_images < 1:
            raise ConfigError("bank_seed_images must be >= 1")


@dataclass
class BankConfig:
    K: int = 50
    policy: BankUpdatePolicy = field(default_factory=BankUpdatePolicy)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    regen: InteractionStrategy = field(default_factory=InteractionStrategy)

    def __post_init__(self):
        C = self.data.source.class_count
        if self.bank.K < C:
            raise ConfigError(f"bank size K={self.bank.K} is smaller than the class count {C}")

    @property
    def n_classes(self) -> int:
        return self.data.source.class_count

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        try:
            return _build(cls, doc, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **dotted) -> RunConfig:
        """Copy with overrides given as ``{"train.lr": 0.1, ...}`` (pass via ``**``)."""
        doc = self.to_dict()
        for key, value in dotted.items():
            set_dotted(doc, key, value)
        return RunConfig.from_dict(doc)


def set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}{name}.") if sub else value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "augment"): AugmentConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "bank"): BankConfig,
    (RunConfig, "regen"): InteractionStrategy,
    (DataConfig, "source"): DomainSpec,
    (DataConfig, "target"): DomainSpec,
    (BankConfig, "policy"): BankUpdatePolicy,
}


def published_preset() -> RunConfig:
    """The published hyper-parameters (K=300) on the desk benchmark."""
    return RunConfig().replace(
        **{"bank.K": 300, "train.lambda_ins": 1.0, "train.tp": 0.1, "train.tau": 0.968,
           "regen.phi": 0.9, "bank.policy.momentum": 0.999, "bank.policy.interval": 50}
    )


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
    return RunConfig.from_dict(doc)


# -- JSON schema ------------------------------------------------------------------

_ENUMS = {
    "bank.policy.sampling": ["NU", "RS", "ILS", "CBS"],
    "bank.policy.selecting": ["RS", "AVG", "KM", "BPS"],
    "bank.policy.slot_mode": ["round_robin", "broadcast"],
    "regen.z_mode": ["smoothing", "scaling"],
    "regen.q_mode": ["smoothing", "scaling"],
    "train.ins_reduction": ["mean", "sum"],
    "train.gate_on": ["z_hat", "z"],
    "data.source.layout": ["voronoi", "stripes", "blobs"],
    "data.target.layout": ["voronoi", "stripes", "blobs"],
}

_DESCRIPTIONS = {
    "bank.K": "bank size (slots)",
    "bank.policy.interval": "iterations between bank updates",
    "bank.policy.momentum": "EMA momentum of bank updates",
    "bank.policy.sigma": "a pixel is an edge when its 3x3 window holds more than sigma classes",
    "regen.phi": "weight kept on the semantic pseudo-label when smoothing",
    "train.tau": "confidence gate of the target loss",
    "train.tp": "temperature of the instance softmax",
    "train.lambda_ins": "weight of the instance loss",
}


def _leaf_schema(value, key):
    if isinstance(value, bool):
        s = {"type": "boolean"}
    elif isinstance(value, int):
        s = {"type": "integer"}
    elif isinstance(value, float):
        s = {"type": "number"}
    elif isinstance(value, str):
        s = {"type": "string"}
    elif value and isinstance(value[0], list):
        s = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
    else:
        s = {"type": "array", "items": {"type": "number"}}
    s["default"] = value
    if key in _ENUMS:
        s["enum"] = _ENUMS[key]
    if key in _DESCRIPTIONS:
        s["description"] = _DESCRIPTIONS[key]
    return s


def _object_schema(cls, obj, path):
    props = {}
    for f in dataclasses.fields(cls):
        value, key = getattr(obj, f.name), path + f.name
        sub = _NESTED.get((cls, f.name))
        props[f.name] = _object_schema(sub, value, key + ".") if sub else _leaf_schema(value, key)
    return {"type": "object", "additionalProperties": False, "properties": props}


def config_schema() -> dict:
    """JSON schema of the run configuration, defaults included (shipped as schema/config.schema.json)."""
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "duallevel run configuration",
        "description": "Every key is optional; missing keys take the listed default. Unknown keys are rejected.",
        **_object_schema(RunConfig, RunConfig(), ""),
    }
