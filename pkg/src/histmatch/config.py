"""JSON configuration: schema, validation and conversion to option objects."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .analysis import StoppingRule, WaveOptions
from .emulator import Target
from .errors import SchemaError
from .proposal import ProposalOptions
from .space import ParameterSpace
from .training import TrainingOptions

__all__ = ["CONFIG_SCHEMA", "Config", "load_config", "validate_config", "sirs_demo_config"]

_number = {"type": "number"}
_pair = {"type": "array", "items": _number, "minItems": 2, "maxItems": 2}
_target = {
    "oneOf": [
        _pair,
        {"type": "object", "properties": {"val": _number, "sigma": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["val", "sigma"], "additionalProperties": False},
        {"type": "object", "properties": {"lower": _number, "upper": _number},
         "required": ["lower", "upper"], "additionalProperties": False},
    ]
}
_simulator = {
    "oneOf": [
        {"type": "string"},
        {"type": "object",
         "properties": {"demo": {"type": "string"}, "reps": {"type": "integer", "minimum": 1},
                        "t_end": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["demo"], "additionalProperties": False},
        {"type": "object",
         "properties": {"command": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                        "batch_size": {"type": "integer", "minimum": 1},
                        "outputs": {"type": "array", "items": {"type": "string"}},
                        "stochastic": {"type": "boolean"},
                        "timeout": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["command"], "additionalProperties": False},
    ]
}


def _options_schema(cls) -> dict:
    props = {name: {} for name in cls.__dataclass_fields__}
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "histmatch configuration",
    "type": "object",
    "properties": {
        "parameters": {"type": "object", "additionalProperties": _pair, "minProperties": 1},
        "targets": {"type": "object", "additionalProperties": _target},
        "outputs": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "discrepancies": {"type": "object", "additionalProperties": {
            "type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2}},
        "training": _options_schema(TrainingOptions),
        "proposal": _options_schema(ProposalOptions),
        "wave": {"type": "object", "properties": {
            "n_points": {"type": "integer", "minimum": 2},
            "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "max_type1_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            "carry_over": {"type": "boolean"},
            "n_train": {"type": "integer", "minimum": 2},
            "n_valid": {"type": "integer", "minimum": 0},
        }, "additionalProperties": False},
        "stopping": {"type": "object", "properties": {
            "ratio": {"type": "number", "exclusiveMinimum": 0},
            "max_waves": {"type": "integer", "minimum": 1},
            "match_target": {"type": ["integer", "null"], "minimum": 0},
        }, "additionalProperties": False},
        "simulator": _simulator,
        "variance_mode": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
    },
    "required": ["parameters"],
    "additionalProperties": False,
}


@dataclass
class Config:
    space: ParameterSpace
    targets: dict[str, Target]
    outputs: tuple[str, ...]
    discrepancies: dict[str, tuple[float, float]] = field(default_factory=dict)
    training: TrainingOptions = field(default_factory=TrainingOptions)
    proposal: ProposalOptions = field(default_factory=ProposalOptions)
    wave: dict = field(default_factory=dict)
    stopping: StoppingRule = field(default_factory=StoppingRule)
    simulator: Any = None
    variance_mode: bool = False
    seed: int = 0
    workers: int = 1
    raw: dict = field(default_factory=dict)

    def wave_options(self, **overrides) -> WaveOptions:
        w = {k: v for k, v in self.wave.items() if k not in ("n_train", "n_valid")}
        kw = dict(outputs=self.outputs, training=self.training, proposal=self.proposal,
                  discrepancies=self.discrepancies or None, variance_mode=self.variance_mode,
                  seed=self.seed, **w)
        kw.update(overrides)
        return WaveOptions(**kw)


def validate_config(raw: Mapping) -> Config:
    """Check ``raw`` against the schema and the cross-field rules; raise :class:`SchemaError`."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"config invalid at {where}: {exc.message}") from None
    try:
        space = ParameterSpace.from_dict(raw["parameters"])
        targets = {k: Target.from_spec(v) for k, v in raw.get("targets", {}).items()}
        training = TrainingOptions.from_dict(raw.get("training"))
        proposal = ProposalOptions.from_dict(raw.get("proposal"))
        stopping = StoppingRule.from_dict(raw.get("stopping"))
    except SchemaError:
        raise
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"config invalid: {exc}") from None
    outputs = tuple(raw.get("outputs") or targets)
    unknown = [k for k in targets if k not in outputs]
    if unknown:
        raise SchemaError(f"targets name unknown outputs {unknown}")
    overlap = set(outputs) & set(space.names)
    if overlap:
        raise SchemaError(f"names used as both parameter and output: {sorted(overlap)}")
    disc = {k: (float(v[0]), float(v[1])) for k, v in raw.get("discrepancies", {}).items()}
    unknown = [k for k in disc if k not in outputs]
    if unknown:
        raise SchemaError(f"discrepancies name unknown outputs {unknown}")
    return Config(space, targets, outputs, disc, training, proposal, dict(raw.get("wave", {})),
                  stopping, raw.get("simulator"), bool(raw.get("variance_mode", False)),
                  int(raw.get("seed", 0)), int(raw.get("workers", 1)), dict(raw))


def load_config(path) -> Config:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise SchemaError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config {path} is not valid JSON: {exc}") from None
    return validate_config(raw)


def sirs_demo_config(stochastic: bool = False) -> dict:
    """The bundled SIRS configuration as a plain dict."""
    from .sims import SIRS_SPACE, SIRS_TARGETS

    cfg = {
        "parameters": SIRS_SPACE.to_dict(),
        "targets": {k: t.to_spec() for k, t in SIRS_TARGETS.items()},
        "simulator": "sirs-gillespie" if stochastic else "sirs-ode",
        "wave": {"n_points": 90, "n_train": 30, "n_valid": 60},
        "seed": 0,
    }
    if stochastic:
        cfg["variance_mode"] = True
    return cfg
