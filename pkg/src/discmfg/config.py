"""Run configuration: JSON schema, defaults and flag overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Any, Optional

import jsonschema

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_BOUNDS = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_POLY = {"type": "array", "items": _NUM}

_XI = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["normal", "uniform", "point"]},
        "mean": _NUM, "std": _NONNEG, "low": _NUM, "high": _NUM,
    },
    "additionalProperties": False,
}

_COMMON = {"sigma": _NONNEG, "T": _POS, "action_bounds": _BOUNDS, "xi": _XI,
           "noise": {"enum": ["gaussian_increments", "rademacher_scaled", "zero"]}}

_FAMILY_PARAMS = {
    "lq": {"c": _POS, "c_L": _NONNEG},
    "tanh": {"c": _POS, "scale_k": _POS},
    "custom-polynomial": {"c": _POS, "b0": _POLY, "f_cross": _NUM, "f_poly": _POLY, "g_cross": _NUM,
                          "g_poly": _POLY},
}

_ALL_PARAMS = {name: schema for params in _FAMILY_PARAMS.values() for name, schema in params.items()}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "problem": {
            "type": "object",
            "properties": {"family": {"enum": sorted(_FAMILY_PARAMS)}, **_COMMON, **_ALL_PARAMS},
            "required": ["family"],
            "allOf": [
                {
                    "if": {"properties": {"family": {"const": fam}}},
                    "then": {"propertyNames": {"enum": ["family", *_COMMON, *params]}},
                }
                for fam, params in _FAMILY_PARAMS.items()
            ],
        },
        "solver": {
            "type": "object",
            "properties": {
                "method": {"enum": ["pasting", "bsde"]},
                "k": _POS_INT,
                "paths": _POS_INT,
                "seed": {"type": "integer", "minimum": 0},
                "tol": {"oneOf": [_POS, {"type": "null"}]},
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_iters": _POS_INT,
                "basis_degree": {"type": "integer", "minimum": 0, "maximum": 12},
                "basis": {"enum": ["poly", "indicator"]},
                "quadrature": {"enum": ["gauss_hermite", "common_random_numbers"]},
                "n_knots": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "ks": {"type": "array", "items": _POS_INT, "minItems": 1},
                "k_ref": _POS_INT,
                "workers": _POS_INT,
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string", "minLength": 1}},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "problem": {"family": "lq", "c": 1.0, "c_L": 1.0, "sigma": 0.5, "T": 1.0},
    "solver": {"method": "pasting", "k": 2, "paths": 100_000, "seed": 0, "tol": None, "damping": 0.5,
               "max_iters": 200, "basis_degree": 3, "basis": "poly", "quadrature": "gauss_hermite",
               "n_knots": 257},
    "sweep": {"ks": [2, 4, 8, 16, 32], "k_ref": 256, "workers": 1},
    "output": {"dir": "out"},
}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(json_pointer, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{ptr or '/'}: {msg}" for ptr, msg in self.errors))


def json_pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate(config: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: (json_pointer(e.absolute_path), e.message))
    if errors:
        raise ConfigError((json_pointer(e.absolute_path), e.message) for e in errors)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_value(text: str) -> Any:
    """JSON literal if it parses, else the raw string (``c=2``, ``xi={"kind":"point"}``)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass(frozen=True)
class RunConfig:
    problem: dict
    solver: dict
    sweep: dict
    output: dict

    @classmethod
    def build(cls, file_config: Optional[dict] = None, overrides: Optional[dict] = None) -> "RunConfig":
        """Defaults, then the file, then flag overrides; validates the result.

        A file that switches family drops the default family's parameters.
        """
        base = copy.deepcopy(DEFAULTS)
        file_config = file_config or {}
        if not isinstance(file_config, dict):
            raise ConfigError([("", "configuration must be a JSON object")])
        fam = (file_config.get("problem") or {}).get("family") if isinstance(file_config.get("problem"), dict) else None
        if fam is not None and fam != base["problem"]["family"]:
            base["problem"] = {k: v for k, v in base["problem"].items() if k in ("family", *_COMMON)}
        merged = _merge(base, file_config)
        merged = _merge(merged, overrides or {})
        validate(merged)
        return cls(**{k: merged[k] for k in ("problem", "solver", "sweep", "output")})

    def to_dict(self) -> dict:
        return {"problem": copy.deepcopy(self.problem), "solver": copy.deepcopy(self.solver),
                "sweep": copy.deepcopy(self.sweep), "output": copy.deepcopy(self.output)}

    def problem_spec(self, k: Optional[int] = None) -> dict:
        spec = copy.deepcopy(self.problem)
        spec["k"] = int(self.solver["k"] if k is None else k)
        return spec
