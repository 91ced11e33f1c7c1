"""Run configuration: JSON schema, validation, canonical hashing and object builders.

A run is described by one JSON document.  Subsets are lists of 1-based input
indices (``[1]`` is ``X1``).  The hash covers everything that can change a
result; ``threads`` and ``output`` are excluded so that reports written with
different thread counts or to different directories stay byte-identical.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .depmodel import DependencyModel, QuadraticBallOverride, SubsetSpec
from .estimators import INDEX_KINDS, EstimatorConfig
from .exceptions import ConfigError
from .kernels import KernelSpec
from .marginals import GaussianCopula, InputSpace, marginal_from_dict
from .models import model_from_dict
from .screening import MorrisDesign
from .weights import EffectiveWeight, weight_from_dict

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "kbsa run configuration",
    "type": "object",
    "required": ["model", "inputs", "weight", "seed"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["quadratic", "gsobol4", "gfunction", "linear", "constant", "theta_toy", "external"]},
                "d": _POS_INT,
                "N": _POS_INT,
                "a": {"type": "array", "items": _NUM, "minItems": 1},
                "A": {"type": "array", "items": {"type": "array", "items": _NUM}},
                "coefficients": {"type": "array", "items": _NUM, "minItems": 1},
                "intercept": _NUM,
                "value": _NUM,
                "theta": {"type": "array", "items": _NUM, "minItems": 1},
                "theta_weights": {"type": "array", "items": _NUM, "minItems": 1},
                "command": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "batch_size": _POS_INT,
                "timeout": {"type": "number", "exclusiveMinimum": 0},
                "retries": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "inputs": {
            "type": "object",
            "properties": {
                "marginals": {"type": "array", "items": {"$ref": "#/$defs/marginal"}, "minItems": 1},
                "repeat": {
                    "type": "object",
                    "required": ["count", "marginal"],
                    "properties": {"count": _POS_INT, "marginal": {"$ref": "#/$defs/marginal"}},
                    "additionalProperties": False,
                },
                "names": {"type": "array", "items": {"type": "string"}},
                "copula": {
                    "type": "object",
                    "required": ["kind", "corr"],
                    "properties": {"kind": {"const": "gaussian"}, "corr": {"type": "array", "items": {"type": "array", "items": _NUM}}},
                    "additionalProperties": False,
                },
            },
            "oneOf": [{"required": ["marginals"]}, {"required": ["repeat"]}],
            "additionalProperties": False,
        },
        "weight": {"$ref": "#/$defs/weight"},
        "kernels": {"type": "array", "items": {"$ref": "#/$defs/kernel"}, "minItems": 1},
        "subsets": {"type": "array", "items": {"type": "array", "items": _POS_INT, "minItems": 1}, "minItems": 1},
        "kinds": {"type": "array", "items": {"enum": list(INDEX_KINDS)}, "minItems": 1},
        "estimator": {
            "type": "object",
            "properties": {
                "m1": _POS_INT,
                "m": _POS_INT,
                "m_upsilon": _POS_INT,
                "M": _POS_INT,
                "confidence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "route": {"enum": ["auto", "direct", "reweight"]},
                "inner_mc": {"type": "integer", "minimum": 100},
                "inversion_tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-3},
                "chunk": _POS_INT,
            },
            "additionalProperties": False,
        },
        "dependency": {
            "type": "object",
            "properties": {
                "override": {"enum": ["quadratic_ball"]},
                "c": {"type": "number", "exclusiveMinimum": 0},
                "order": {"type": "array", "items": _POS_INT},
            },
            "additionalProperties": False,
        },
        "screening": {
            "type": "object",
            "properties": {
                "threshold": {"type": "number", "minimum": 0},
                "kernel": {"$ref": "#/$defs/kernel"},
                "R": _POS_INT,
                "p": {"type": "integer", "minimum": 2, "multipleOf": 2},
                "mu_mode": {"enum": ["independent", "dependent"]},
            },
            "additionalProperties": False,
        },
        "converge": {
            "type": "object",
            "properties": {
                "schedule": {"type": "array", "items": _POS_INT, "minItems": 1},
                "kind": {"enum": list(INDEX_KINDS)},
                "reference": {"type": "object", "additionalProperties": _NUM},
            },
            "additionalProperties": False,
        },
        "seed": {"type": "integer", "minimum": 0},
        "threads": _POS_INT,
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string"}, "prefix": {"type": "string"}},
            "additionalProperties": False,
        },
    },
    "$defs": {
        "marginal": {
            "type": "object",
            "required": ["family"],
            "properties": {
                "family": {"enum": ["uniform", "normal", "beta", "beta_first_kind"]},
                "lo": _NUM, "hi": _NUM, "mean": _NUM, "sd": _NUM, "a": _NUM, "b": _NUM, "c": _NUM,
                "name": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "kernel": {
            "type": "object",
            "required": ["kernel"],
            "properties": {"kernel": {"enum": ["l1", "lp", "l2", "quadratic", "owen"]}, "p": {"type": "number", "minimum": 1}},
            "additionalProperties": False,
        },
        "weight": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["constant", "indicator_threshold", "polynomial", "smooth_membership", "composite", "functional_loss"]},
                "value": _NUM,
                "lower": {"type": ["number", "array", "null"]},
                "upper": {"type": ["number", "array", "null"]},
                "on": {"enum": ["outputs", "inputs"]},
                "alpha": {"type": ["number", "array"]},
                "slope": _NUM,
                "offset": _NUM,
                "output": {"type": "integer", "minimum": 0},
                "parts": {"type": "array", "items": {"$ref": "#/$defs/weight"}, "minItems": 1},
                "loss": {"enum": ["identity", "norm1", "norm2sq", "exp_neg_norm2sq"]},
                "reduction": {"enum": ["mean", "max", "min"]},
            },
            "additionalProperties": False,
        },
    },
}

EXCLUDED_FROM_HASH = ("threads", "output")


def _path(err) -> str:
    return "/" + "/".join(str(p) for p in err.absolute_path)


def validate(raw: dict) -> dict:
    """Schema and cross-field checks; raises ConfigError naming the offending field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, _path(e))
    return raw


def canonical_json(raw: dict) -> str:
    return json.dumps(raw, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def config_hash(raw: dict) -> str:
    """sha256 of the canonical serialization, ignoring fields that cannot change results."""
    body = {k: v for k, v in raw.items() if k not in EXCLUDED_FROM_HASH}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def load(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def bundled(name: str) -> dict:
    """A config shipped with the package, e.g. ``gsobol_alpha0``."""
    fname = name if name.endswith(".json") else name + ".json"
    try:
        text = resources.files("kbsa").joinpath("configs").joinpath(fname).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no bundled config named {name!r}") from None
    return json.loads(text)


def bundled_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("kbsa").joinpath("configs").iterdir() if p.name.endswith(".json"))


def resolve(ref: str) -> dict:
    """Load a path, or a bundled config when no such file exists."""
    p = Path(ref)
    if p.exists():
        return load(p)
    if p.suffix in ("", ".json") and p.parent == Path("."):
        return bundled(p.stem if p.suffix else ref)
    return load(p)


def apply_overrides(raw: dict, **flags) -> dict:
    """Command-line flags take precedence over file fields."""
    out = copy.deepcopy(raw)
    if flags.get("seed") is not None:
        out["seed"] = int(flags["seed"])
    if flags.get("threads") is not None:
        out["threads"] = int(flags["threads"])
    if flags.get("kernel"):
        ks = [KernelSpec.parse(k).to_dict() for k in flags["kernel"]]
        out["kernels"] = ks
        out.setdefault("screening", {})["kernel"] = ks[0]
    if flags.get("threshold") is not None:
        out.setdefault("screening", {})["threshold"] = float(flags["threshold"])
    if flags.get("out"):
        out.setdefault("output", {})["dir"] = str(flags["out"])
    return out


@dataclass
class Run:
    """Validated configuration turned into library objects."""

    raw: dict
    model: object
    space: InputSpace
    ew: EffectiveWeight
    kernels: list
    subsets: list
    kinds: list
    estimator: EstimatorConfig
    override: object
    order: list | None
    screening: dict
    hash: str

    @property
    def names(self) -> list[str]:
        return self.space.names

    def design(self) -> MorrisDesign:
        s = self.screening
        return MorrisDesign(self.model.d, s.get("R", 50), s.get("p", 8))

    def screening_kernel(self) -> KernelSpec:
        k = self.screening.get("kernel")
        return _kernel(k) if k else self.kernels[0]


def _kernel(spec: dict) -> KernelSpec:
    return KernelSpec(spec["kernel"], spec.get("p", 1.0))


def _space(spec: dict) -> InputSpace:
    if "repeat" in spec:
        margs = [marginal_from_dict(spec["repeat"]["marginal"])] * spec["repeat"]["count"]
        names = spec.get("names")
    else:
        margs = [marginal_from_dict(m) for m in spec["marginals"]]
        names = spec.get("names") or ([m.get("name", f"X{j + 1}") for j, m in enumerate(spec["marginals"])])
    copula = None
    if "copula" in spec:
        corr = np.asarray(spec["copula"]["corr"], dtype=float)
        if corr.shape != (len(margs), len(margs)):
            raise ConfigError(f"correlation matrix must be {len(margs)}x{len(margs)}", "/inputs/copula/corr")
        copula = GaussianCopula(corr)
    return InputSpace(margs, copula, names)


def build(raw: dict) -> Run:
    validate(raw)
    try:
        model = model_from_dict(raw["model"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "/model") from None
    try:
        space = _space(raw["inputs"])
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "/inputs") from None
    d = model.d
    if space.d != d:
        raise ConfigError(f"model has {d} inputs but the input space has {space.d}", "/inputs")
    alpha = raw["weight"].get("alpha")
    if alpha is not None and np.ndim(alpha) == 1 and len(alpha) != d:
        raise ConfigError(f"polynomial weight has {len(alpha)} exponents for {d} inputs", "/weight/alpha")
    try:
        weight = weight_from_dict(raw["weight"], model, d)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "/weight") from None
    ew = EffectiveWeight(weight, space, stream=None)
    subsets = []
    for i, s in enumerate(raw.get("subsets", [[j + 1] for j in range(d)])):
        if max(s) > d or len(set(s)) != len(s):
            raise ConfigError(f"subset {s} is not a set of input indices in 1..{d}", f"/subsets/{i}")
        subsets.append(tuple(sorted(j - 1 for j in s)))
    est = raw.get("estimator", {})
    try:
        cfg = EstimatorConfig(base_seed=raw["seed"], threads=raw.get("threads", 1), **est)
    except ValueError as exc:
        raise ConfigError(str(exc), "/estimator") from None
    dep = raw.get("dependency", {})
    override = None
    if dep.get("override") == "quadratic_ball":
        if d != 3:
            raise ConfigError("the quadratic_ball override needs d = 3", "/dependency/override")
        upper = raw["weight"].get("upper") if raw["weight"]["kind"] == "indicator_threshold" else None
        c = dep.get("c", upper if isinstance(upper, (int, float)) else 1.0)
        if isinstance(upper, (int, float)) and c != upper:
            raise ConfigError(f"override threshold c={c} differs from the weight threshold {upper}", "/dependency/c")
        override = QuadraticBallOverride(c)
    order = None
    if "order" in dep:
        if sorted(dep["order"]) != list(range(1, d + 1)):
            raise ConfigError(f"order must be a permutation of 1..{d}", "/dependency/order")
        order = [j - 1 for j in dep["order"]]
    kernels = [_kernel(k) for k in raw.get("kernels", [{"kernel": "l1"}])]
    return Run(raw, model, space, ew, kernels, subsets, list(raw.get("kinds", INDEX_KINDS)), cfg, override, order,
               raw.get("screening", {}), config_hash(raw))


def base_dependency(run: Run) -> DependencyModel:
    """Dependency model of the full weighted law (no conditioning subset)."""
    cfg = run.estimator
    return DependencyModel(run.ew, SubsetSpec.of((), run.model.d, run.order), cfg.inner_mc, cfg.inversion_tol, run.override)
