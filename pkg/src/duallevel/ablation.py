"""Ablation variants: one swept field per axis, everything else shared."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from duallevel.config import ConfigError, RunConfig
from duallevel.selftrain import TrainResult, train
from duallevel.synthdata import Dataset


@dataclass
class Variant:
    name: str
    overrides: dict
    semantic_only: bool = False


# the bank-free baseline is the semantic-only loop
_BASELINE = {"train.lambda_ins": 0.0, "train.regenerate": False, "regen.phi": 1.0, "bank.policy.sampling": "NU"}
_PLAIN_BANK = {"bank.policy.sampling": "RS", "bank.policy.selecting": "RS"}

COMPONENTS = (
    Variant("baseline", _BASELINE, semantic_only=True),
    Variant("I", {**_PLAIN_BANK, "train.regenerate": False}),
    Variant("II", {**_PLAIN_BANK, "bank.policy.sampling": "CBS", "train.regenerate": False}),
    Variant("III", {"bank.policy.sampling": "CBS", "bank.policy.selecting": "BPS", "train.regenerate": False}),
    Variant("IV", {**_PLAIN_BANK, "train.regenerate": True}),
    Variant("V", {"bank.policy.sampling": "CBS", "bank.policy.selecting": "BPS", "train.regenerate": True}),
)

# the fields each axis may change
AXIS_KEYS = {
    "K": ("bank.K",),
    "u": ("bank.policy.interval",),
    "phi": ("regen.phi",),
    "omega": ("bank.policy.momentum",),
    "sampling": ("bank.policy.sampling",),
    "selecting": ("bank.policy.selecting",),
    "interaction": ("regen.z_mode", "regen.q_mode"),
    "components": ("train.lambda_ins", "train.regenerate", "regen.phi", "bank.policy.sampling", "bank.policy.selecting"),
}

DEFAULT_VALUES = {
    "K": [10, 25, 50, 100, 200],
    "u": [25, 50, 100, 200, 500],
    "phi": [0.0, 0.8, 0.9, 0.95, 1.0],
    "omega": [0.0, 0.9, 0.99, 0.999, 1.0],
    "sampling": ["NU", "RS", "ILS", "CBS"],
    "selecting": ["RS", "AVG", "KM", "BPS"],
    "interaction": ["smoothing/smoothing", "smoothing/scaling", "scaling/smoothing", "scaling/scaling"],
}


def variants(axis: str, values=None) -> list[Variant]:
    if axis not in AXIS_KEYS:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXIS_KEYS)}")
    if axis == "components":
        if values:
            wanted = set(values)
            unknown = wanted - {v.name for v in COMPONENTS}
            if unknown:
                raise ConfigError(f"unknown component variant(s): {', '.join(sorted(unknown))}")
            return [v for v in COMPONENTS if v.name in wanted]
        return list(COMPONENTS)
    vals = list(values) if values else DEFAULT_VALUES[axis]
    out = []
    for v in vals:
        if axis == "interaction":
            try:
                z_mode, q_mode = str(v).split("/")
            except ValueError:
                raise ConfigError(f"interaction values look like 'z_mode/q_mode', got {v!r}") from None
            out.append(Variant(str(v), {"regen.z_mode": z_mode, "regen.q_mode": q_mode}))
        else:
            out.append(Variant(str(v), {AXIS_KEYS[axis][0]: v}))
    return out


def _flatten(doc: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            flat.update(_flatten(v, f"{prefix}{k}."))
        else:
            flat[f"{prefix}{k}"] = v
    return flat


def check_shared(base: RunConfig, configs: list[RunConfig], axis: str) -> None:
    """Raise unless every config differs from ``base`` only in the axis fields."""
    ref = _flatten(base.to_dict())
    allowed = set(AXIS_KEYS[axis]) | {"train.seed"}
    for cfg in configs:
        flat = _flatten(cfg.to_dict())
        changed = {k for k in ref if flat[k] != ref[k]}
        if not changed <= allowed:
            raise ConfigError(f"variant changes unswept fields: {', '.join(sorted(changed - allowed))}")


def variant_config(base: RunConfig, variant: Variant, seed: int) -> RunConfig:
    return base.replace(**variant.overrides, **{"train.seed": seed})


def run_variant(base: RunConfig, variant: Variant, seed: int, source: Dataset, target: Dataset) -> TrainResult:
    return train(variant_config(base, variant, seed), source, target, semantic_only=variant.semantic_only)


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and spread of the final mIoU per variant, in first-seen order."""
    order, groups = [], {}
    for r in rows:
        if r["variant"] not in groups:
            order.append(r["variant"])
            groups[r["variant"]] = []
        groups[r["variant"]].append(r["final_miou"])
    return [
        {"variant": v, "seeds": len(groups[v]), "mean_miou": float(np.mean(groups[v])),
         "std_miou": float(np.std(groups[v]))}
        for v in order
    ]
