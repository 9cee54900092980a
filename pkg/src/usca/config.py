"""Experiment configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

import jsonschema

from .errors import InputError

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_interval = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_box = {"type": "array", "items": _interval}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_eigendecay = _obj({"beta_p": {"type": "number", "exclusiveMinimum": 1}, "C_p": _pos, "F": _pos})
_kernel = _obj({
    "family": {"enum": ["se", "matern", "finite"]},
    "lengthscale": _pos,
    "nu": {"enum": [0.5, 1.5, 2.5]},
    "input_dim": _posint,
    "feature_kind": {"enum": ["linear", "mercer"]},
    "scale": _pos,
    "eigenvalues": {"type": "array", "items": _pos, "minItems": 1},
    "frequency_scale": _num,
    "eigendecay": _eigendecay,
}, required=["family"])

_context = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["uniform", "truncated_gaussian", "mixture"]},
        "mean": {"type": "array", "items": _num},
        "stddev": {"type": "array", "items": _pos},
        "weights": {"type": "array", "items": _num},
        "components": {"type": "array", "items": {"$ref": "#/$defs/context"}},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

SCHEMA: dict[str, Any] = {
    "$defs": {"context": _context},
    "type": "object",
    "additionalProperties": False,
    "required": ["master_seed", "environment"],
    "properties": {
        "master_seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "environment": _obj({
            "domain": _obj({"action_box": _box, "context_box": _box}, required=["action_box"]),
            "kernel": _kernel,
            "B": {"type": "number", "minimum": 0},
            "n_centers": _posint,
            "noise": _obj({"kind": {"enum": ["gaussian", "uniform"]}, "R": {"type": "number", "minimum": 0}}),
            "context_distribution": {"$ref": "#/$defs/context"},
            "clip_bound": _pos,
        }, required=["domain", "kernel", "B"]),
        "algorithm": _obj({
            "T": _posint, "epsilon": _pos, "tau": _pos, "mech_grid": _posint, "z_cap": _posint,
            "gamma_trials": _posint, "n_eval": _posint,
        }),
        "audit": _obj({
            "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "trials": _posint,
            "n_pairs": _posint,
            "seeds": _posint,
            "T_ladder": {"type": "array", "items": _posint, "minItems": 1},
            "eps_ladder": {"type": "array", "items": _pos, "minItems": 1},
            "epsilons": {"type": "array", "items": _pos, "minItems": 1},
            "eps_T": _posint,
            "spectral": _obj({"feature_dim": _posint, "box": _interval, "T": _posint, "trials": _posint,
                              "tau": _pos, "kind": {"enum": ["linear", "mercer"]},
                              "eigenvalues": {"type": "array", "items": _pos}}),
            "geometry": _obj({"d": _posint, "diameter": _pos, "lipschitz": _pos, "r": _pos,
                              "n_mc": _posint, "x_star": {"type": "array", "items": _num}}),
        }),
    },
}

DEFAULTS: dict[str, Any] = {
    "output_dir": "out",
    "algorithm": {"T": 128, "epsilon": 1.0, "tau": 1.0, "mech_grid": 64, "z_cap": 5000,
                  "gamma_trials": 10, "n_eval": 200},
    "audit": {"delta": 0.1, "trials": 20, "n_pairs": 200, "seeds": 10, "T_ladder": [64, 128, 256, 512],
              "eps_ladder": [0.1, 1.0, 10.0], "epsilons": [0.5, 1.0, 5.0],
              "spectral": {"feature_dim": 4, "box": [-1.0, 1.0], "T": 256, "trials": 100, "tau": 1.0,
                           "kind": "linear"},
              "geometry": {"d": 2, "diameter": 1.0, "lipschitz": 1.0, "r": 0.3, "n_mc": 1_000_000}},
}


class ConfigError(InputError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict[str, Any]) -> dict[str, Any]:
    """Validate against SCHEMA, then fill defaults. Raises ConfigError with a JSON pointer."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(e.absolute_path)))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "required":
            missing = err.message.split("'")[1]
            path.append(missing)
            raise ConfigError(f"missing required key {missing!r}", _pointer(path))
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path.append(extra[0] if extra else "")
            raise ConfigError(f"unknown key {path[-1]!r}", _pointer(path))
        raise ConfigError(err.message, _pointer(path))
    return _merge(DEFAULTS, raw)


def load(path) -> dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return validate(raw)
