"""Strict JSON run configuration shared by the CLI subcommands."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .activations import ActivationSpec
from .synth import SynthSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    iterations: int = 50
    warmup: int = 3
    batch_size: int = 256
    k: int = 8
    kinds: list = field(default_factory=lambda: ["topk", "batch_topk", "top_afa"])
    seed: int = 0


@dataclass
class EvalConfig:
    batch_size: int = 4096
    max_inputs: int | None = None
    trim: float = 0.005


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(d=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        out = {name: _section_dict(getattr(self, name)) for name in SECTIONS}
        out["activation"] = {"kind": self.activation.kind, "k": self.activation.k,
                             "kappa": self.activation.kappa,
                             "eval_threshold": self.activation.eval_threshold}
        return out


def _section_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _check_type(section: str, name: str, value, annotation: str):
    allowed = []
    if "None" in annotation:
        allowed.append(type(None))
    if "bool" in annotation:
        allowed.append(bool)
    if "float" in annotation:
        allowed += [int, float]
    if "int" in annotation:
        allowed.append(int)
    if "str" in annotation:
        allowed.append(str)
    if "list" in annotation:
        allowed.append(list)
    ok = isinstance(value, tuple(allowed))
    if isinstance(value, bool) and bool not in allowed:
        ok = False
    if not ok:
        raise ConfigError(f"{section}.{name}: expected {annotation}, got {type(value).__name__} {value!r}")


SECTIONS = {
    "synth": SynthSpec,
    "train": TrainConfig,
    "activation": ActivationSpec,
    "eval": EvalConfig,
    "bench": BenchConfig,
}


def _build(section: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    for name, value in values.items():
        _check_type(section, name, value, str(known[name].type))
    try:
        if section == "synth" and "h" not in values:
            values = {**values, "h": None}
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from None


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    return RunConfig(**{name: _build(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()})


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)


def defaults() -> dict:
    return parse_config({}).to_dict()
