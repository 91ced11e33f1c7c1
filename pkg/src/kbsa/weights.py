"""Weight functions describing a behaviour of interest, and the effective weight.

A weight maps an ``(n, d)`` array of inputs to ``n`` non-negative reals.  Some
weights read model outputs (indicator of a safe domain, membership of a
cluster); others act on the inputs directly (polynomial weights).

The effective weight multiplies a weight by the copula density evaluated at the
marginal-CDF image of the point, so that every weighted law becomes a
reweighting of the independent product of the marginals.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .exceptions import DegenerateWeightError, DimensionMismatchError
from .marginals import InputSpace, draw
from .streams import Stream, as_stream


class PowerFactor:
    """One-dimensional factor ``t ** alpha``."""

    def __init__(self, alpha: float):
        self.alpha = float(alpha)

    def __call__(self, t):
        return np.power(t, self.alpha)


class WeightFunction:
    """Base class.

    Attributes used by samplers:

    * ``binary`` -- values are 0 or 1 only (rejection sampling applies);
    * ``upper_bound`` -- a known finite supremum, or None;
    * ``factors()`` -- per-coordinate 1-D functions whose product is the weight
      up to a positive constant, or None when the weight does not factorize.
      Coordinates past the end of the list have a constant factor.
    """

    binary = False
    upper_bound: float | None = None
    kind = "base"

    def _w(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(self._w(x[None, :])[0])
        return np.asarray(self._w(x), dtype=float)

    def factors(self) -> list[Callable] | None:
        return None

    def scaled(self, lam: float) -> "WeightFunction":
        return ScaledWeight(self, lam)

    def to_dict(self) -> dict:
        raise NotImplementedError


class Constant(WeightFunction):
    kind = "constant"

    def __init__(self, value: float = 1.0):
        if not value > 0:
            raise ValueError("constant weight must be positive")
        self.value = float(value)
        self.upper_bound = self.value

    def _w(self, x):
        return np.full(len(x), self.value)

    def factors(self):
        return []

    def to_dict(self):
        return {"kind": "constant", "value": self.value}


def _box(values: np.ndarray, lower, upper) -> np.ndarray:
    """Indicator that every component of ``values`` (shape (n, ...)) lies in [lower, upper]."""
    lo = -np.inf if lower is None else np.asarray(lower, dtype=float)
    hi = np.inf if upper is None else np.asarray(upper, dtype=float)
    inside = (values >= lo) & (values <= hi)
    inside = inside.reshape(len(values), -1)
    return (inside[:, 0] if inside.shape[1] == 1 else np.all(inside, axis=1)).astype(float)


class IndicatorThreshold(WeightFunction):
    """``1`` when ``score(x)`` lies in the box ``[lower, upper]``, else ``0``.

    ``score`` is the model output when a model is given (optionally passed
    through ``classifier``), otherwise the input point itself.
    """

    kind = "indicator_threshold"
    binary = True
    upper_bound = 1.0

    def __init__(self, model=None, lower=None, upper=None, classifier: Callable | None = None):
        if lower is None and upper is None:
            raise ValueError("an indicator needs a lower or an upper bound")
        self.model, self.lower, self.upper, self.classifier = model, lower, upper, classifier

    def score(self, x):
        s = self.model.evaluate(x) if self.model is not None else x
        return self.classifier(s) if self.classifier is not None else s

    def _w(self, x):
        return _box(np.asarray(self.score(x), dtype=float), self.lower, self.upper)

    def to_dict(self):
        return {"kind": self.kind, "lower": self.lower, "upper": self.upper}


class Polynomial(WeightFunction):
    """``prod_j x_j ** alpha_j`` on non-negative inputs."""

    kind = "polynomial"

    def __init__(self, alpha: Sequence[float]):
        self.alpha = np.asarray(alpha, dtype=float)
        if np.any(self.alpha < 0):
            raise ValueError("polynomial exponents must be non-negative")

    def _w(self, x):
        if x.shape[1] != len(self.alpha):
            raise DimensionMismatchError(f"polynomial weight has {len(self.alpha)} exponents, input has {x.shape[1]}")
        return np.prod(np.power(x, self.alpha), axis=1)

    def factors(self):
        return [PowerFactor(a) for a in self.alpha]

    @property
    def upper_bound(self):
        return None

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha.tolist()}


class SmoothMembership(WeightFunction):
    """Logistic membership ``1 / (1 + exp(-slope * (s - offset)))`` of a scalar score."""

    kind = "smooth_membership"
    upper_bound = 1.0

    def __init__(self, model=None, slope: float = 1.0, offset: float = 0.0, classifier: Callable | None = None, output: int = 0):
        self.model, self.slope, self.offset, self.classifier, self.output = model, float(slope), float(offset), classifier, output

    def score(self, x):
        s = self.model.evaluate(x) if self.model is not None else x
        if self.classifier is not None:
            return np.asarray(self.classifier(s), dtype=float).reshape(len(x))
        return np.asarray(s, dtype=float)[:, self.output]

    def _w(self, x):
        return special.expit(self.slope * (self.score(x) - self.offset))

    def to_dict(self):
        return {"kind": self.kind, "slope": self.slope, "offset": self.offset, "output": self.output}


class Composite(WeightFunction):
    """Product of weights, e.g. a membership times an indicator."""

    kind = "composite"

    def __init__(self, *parts: WeightFunction):
        if not parts:
            raise ValueError("a composite weight needs at least one part")
        self.parts = parts
        self.binary = all(p.binary for p in parts)
        bounds = [p.upper_bound for p in parts]
        self.upper_bound = math.prod(bounds) if all(b is not None for b in bounds) else None

    def _w(self, x):
        out = self.parts[0](x)
        for p in self.parts[1:]:
            out = out * p(x)
        return out

    def factors(self):
        per = [p.factors() for p in self.parts]
        if any(f is None for f in per):
            return None
        d = max(len(f) for f in per)

        def prod(fs):
            if all(isinstance(f, PowerFactor) for f in fs):
                return PowerFactor(sum(f.alpha for f in fs))
            return lambda t: math.prod(f(t) for f in fs)

        return [prod([f[j] for f in per if j < len(f)]) for j in range(d)]

    def to_dict(self):
        return {"kind": self.kind, "parts": [p.to_dict() for p in self.parts]}


_LOSSES = {
    "identity": lambda y: y[..., 0],
    "norm1": lambda y: np.abs(y).sum(axis=-1),
    "norm2sq": lambda y: (y * y).sum(axis=-1),
    "exp_neg_norm2sq": lambda y: np.exp(-(y * y).sum(axis=-1)),
}
_REDUCE = {"mean": np.mean, "max": np.max, "min": np.min}


class FunctionalLoss(WeightFunction):
    """Loss aggregated over a model's theta grid, times an indicator over all thetas.

    ``loss`` maps outputs ``(n, T, N)`` to ``(n, T)`` non-negative values; it is
    reduced across theta with ``reduction``.  The indicator requires the output
    at every theta to lie in ``[lower, upper]`` (omit both to drop it).
    """

    kind = "functional_loss"

    def __init__(self, model, loss: Callable | str = "norm2sq", reduction: str = "mean", lower=None, upper=None):
        if model.theta_grid is None:
            raise ValueError("functional loss weights need a model with a theta grid")
        if reduction not in _REDUCE:
            raise ValueError(f"reduction must be one of {sorted(_REDUCE)}")
        self.model, self.reduction, self.lower, self.upper = model, reduction, lower, upper
        self.loss_name = loss if isinstance(loss, str) else None
        self.loss = _LOSSES[loss] if isinstance(loss, str) else loss

    def _w(self, x):
        y = self.model.evaluate_grid(x)
        val = _REDUCE[self.reduction](np.asarray(self.loss(y), dtype=float), axis=1)
        if self.lower is None and self.upper is None:
            return val
        return val * _box(y, self.lower, self.upper)

    def to_dict(self):
        return {"kind": self.kind, "loss": self.loss_name, "reduction": self.reduction, "lower": self.lower, "upper": self.upper}


class CallableWeight(WeightFunction):
    kind = "callable"

    def __init__(self, fn: Callable, binary: bool = False, upper_bound: float | None = None, factors=None):
        self.fn, self.binary, self.upper_bound, self._factors = fn, binary, upper_bound, factors

    def _w(self, x):
        return np.asarray(self.fn(x), dtype=float).reshape(len(x))

    def factors(self):
        return self._factors

    def to_dict(self):
        return {"kind": self.kind}


class ScaledWeight(WeightFunction):
    kind = "scaled"

    def __init__(self, base: WeightFunction, lam: float):
        if not lam > 0:
            raise ValueError("scale must be positive")
        self.base, self.lam = base, float(lam)
        self.upper_bound = None if base.upper_bound is None else self.lam * base.upper_bound

    def _w(self, x):
        return self.lam * self.base(x)

    def factors(self):
        return self.base.factors()

    def to_dict(self):
        return {"kind": self.kind, "scale": self.lam, "base": self.base.to_dict()}


def weight_from_dict(spec: dict, model=None, d: int | None = None) -> WeightFunction:
    kind = spec.get("kind")
    if kind == "constant":
        return Constant(spec.get("value", 1.0))
    if kind == "indicator_threshold":
        target = None if spec.get("on") == "inputs" else model
        return IndicatorThreshold(target, spec.get("lower"), spec.get("upper"))
    if kind == "polynomial":
        alpha = spec["alpha"]
        if np.ndim(alpha) == 0:
            alpha = [alpha] * int(d)
        return Polynomial(alpha)
    if kind == "smooth_membership":
        return SmoothMembership(model, spec.get("slope", 1.0), spec.get("offset", 0.0), output=spec.get("output", 0))
    if kind == "composite":
        return Composite(*(weight_from_dict(p, model, d) for p in spec["parts"]))
    if kind == "functional_loss":
        return FunctionalLoss(model, spec.get("loss", "norm2sq"), spec.get("reduction", "mean"), spec.get("lower"), spec.get("upper"))
    raise ValueError(f"unknown weight kind {kind!r}")


class EffectiveWeight:
    """``w_e(x) = w(x) * c(F_1(x_1), ..., F_d(x_d))`` with a pilot sanity check.

    Under the independence copula the weight is returned untouched.
    """

    def __init__(self, weight: WeightFunction, space: InputSpace, pilot_n: int = 1000, stream=None):
        self.weight, self.space = weight, space
        if pilot_n:
            st = as_stream(stream) if stream is not None else Stream(0, ("weight-pilot",))
            vals = self(draw(space, pilot_n, st))
            mean = float(np.mean(vals))
            if not math.isfinite(mean) or np.any(vals < 0):
                raise DegenerateWeightError("weight pilot produced negative or non-finite values")
            if mean == 0.0:
                raise DegenerateWeightError(f"weight vanishes on all {pilot_n} pilot points drawn from the inputs")

    @property
    def d(self) -> int:
        return self.space.d

    @property
    def binary(self) -> bool:
        return self.weight.binary and self.space.independent

    @property
    def upper_bound(self) -> float | None:
        return self.weight.upper_bound if self.space.independent else None

    def factors(self):
        return self.weight.factors() if self.space.independent else None

    def __call__(self, x) -> np.ndarray:
        w = self.weight(x)
        if self.space.independent:
            return w
        return w * self.space.copula(np.asarray(x, dtype=float))


def weight_eval(w: WeightFunction, x):
    return w(x)


def effective_weight_eval(ew: EffectiveWeight, x):
    return ew(x)


def normalizing_constant(ew: EffectiveWeight, n: int, stream=None) -> tuple[float, float]:
    """Monte Carlo estimate of ``E[w_e(Y)]``, ``Y ~ F_ind``, and its standard error."""
    if n < 2:
        raise ValueError("n must be >= 2")
    vals = np.asarray(ew(draw(ew.space, n, stream)), dtype=float)
    if not np.any(vals > 0):
        raise DegenerateWeightError(f"weight is zero on all {n} sampled points")
    mean = math.fsum(vals) / n
    return mean, float(np.std(vals, ddof=1) / math.sqrt(n))
