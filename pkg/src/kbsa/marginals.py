"""Marginal distribution families and the input space they span.

Four families are supported: ``Uniform``, ``Normal``, ``Beta`` and
``BetaFirstKind`` (a Beta law stretched onto ``[0, c]``).  All methods are
vectorised over numpy arrays.

Unbounded supports: ``quantile(0)`` / ``quantile(1)`` of a Normal would be
``-inf`` / ``+inf``; they are mapped to ``-/+ sys.float_info.max`` instead so
downstream arithmetic stays NaN-free.  Such families carry ``unbounded = True``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .exceptions import DimensionMismatchError, DomainError
from .streams import Stream, as_stream, open_uniform

_BIG = sys.float_info.max


def _check_prob(p):
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise DomainError("probability outside [0, 1]")
    return p


def _out(values, like):
    return float(values) if np.ndim(like) == 0 else values


class MarginalDistribution:
    """Common interface; subclasses implement ``_cdf``, ``_ppf`` and ``_pdf``."""

    family = "base"
    unbounded = False

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return _out(np.clip(self._cdf(x), 0.0, 1.0), x)

    def quantile(self, p):
        p = _check_prob(p)
        q = self._ppf(p)
        if self.unbounded:
            q = np.clip(q, -_BIG, _BIG)
        return _out(q, p)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return _out(self._pdf(x), x)

    def sample(self, n: int, stream=None) -> np.ndarray:
        gen = as_stream(stream).generator()
        return self._ppf(open_uniform(gen, n))

    @property
    def support(self) -> tuple[float, float]:
        lo, hi = self._ppf(np.array([0.0, 1.0]))
        return float(lo), float(hi)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(MarginalDistribution):
    lo: float = 0.0
    hi: float = 1.0
    family = "uniform"

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("Uniform requires hi > lo")

    def _cdf(self, x):
        return (x - self.lo) / (self.hi - self.lo)

    def _ppf(self, p):
        return self.lo + p * (self.hi - self.lo)

    def _pdf(self, x):
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)

    def to_dict(self):
        return {"family": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Normal(MarginalDistribution):
    mean: float = 0.0
    sd: float = 1.0
    family = "normal"
    unbounded = True

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("Normal requires sd > 0")

    def _cdf(self, x):
        return special.ndtr((x - self.mean) / self.sd)

    def _ppf(self, p):
        return self.mean + self.sd * special.ndtri(p)

    def _pdf(self, x):
        z = (x - self.mean) / self.sd
        return np.exp(-0.5 * z * z) / (self.sd * np.sqrt(2.0 * np.pi))

    def to_dict(self):
        return {"family": "normal", "mean": self.mean, "sd": self.sd}


def _beta_pdf(t, a, b):
    t = np.asarray(t, dtype=float)
    inside = (t > 0.0) & (t < 1.0)
    safe = np.where(inside, t, 0.5)
    logp = special.xlogy(a - 1.0, safe) + special.xlog1py(b - 1.0, -safe) - special.betaln(a, b)
    out = np.where(inside, np.exp(logp), 0.0)
    # right end point belongs to the support, (0, 1]
    at_one = t == 1.0
    if np.any(at_one):
        edge = a / special.beta(a, 1.0) if b == 1.0 else (0.0 if b > 1.0 else np.inf)
        out = np.where(at_one, edge if b != 1.0 else 1.0 / special.beta(a, 1.0), out)
    return out


@dataclass(frozen=True)
class Beta(MarginalDistribution):
    a: float
    b: float
    family = "beta"

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Beta shape parameters must be positive")

    def _cdf(self, x):
        return special.betainc(self.a, self.b, np.clip(x, 0.0, 1.0))

    def _ppf(self, p):
        return special.betaincinv(self.a, self.b, p)

    def _pdf(self, x):
        return _beta_pdf(x, self.a, self.b)

    def to_dict(self):
        return {"family": "beta", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class BetaFirstKind(MarginalDistribution):
    """``c * Beta(a, b)``, supported on ``[0, c]``."""

    c: float
    a: float
    b: float
    family = "beta_first_kind"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("BetaFirstKind requires scale c > 0")
        if not (self.a > 0 and self.b > 0):
            raise ValueError("BetaFirstKind shape parameters must be positive")

    def _cdf(self, x):
        return special.betainc(self.a, self.b, np.clip(x / self.c, 0.0, 1.0))

    def _ppf(self, p):
        return self.c * special.betaincinv(self.a, self.b, p)

    def _pdf(self, x):
        return _beta_pdf(np.asarray(x, dtype=float) / self.c, self.a, self.b) / self.c

    def to_dict(self):
        return {"family": "beta_first_kind", "c": self.c, "a": self.a, "b": self.b}


def cdf(dist: MarginalDistribution, x):
    return dist.cdf(x)


def quantile(dist: MarginalDistribution, p):
    return dist.quantile(p)


def density(dist: MarginalDistribution, x):
    return dist.density(x)


def marginal_from_dict(spec: dict) -> MarginalDistribution:
    family = spec.get("family")
    params = {k: v for k, v in spec.items() if k not in ("family", "name")}
    try:
        cls = {"uniform": Uniform, "normal": Normal, "beta": Beta, "beta_first_kind": BetaFirstKind}[family]
    except KeyError:
        raise ValueError(f"unknown marginal family {family!r}") from None
    return cls(**params)


# ---------------------------------------------------------------------------
# input space


def independence_copula(u: np.ndarray) -> np.ndarray:
    return np.ones(np.shape(u)[:-1])


class GaussianCopula:
    """Density of the Gaussian copula with correlation matrix ``corr``."""

    def __init__(self, corr):
        corr = np.asarray(corr, dtype=float)
        self.corr = corr
        self._prec = np.linalg.inv(corr) - np.eye(len(corr))
        self._logdet = np.linalg.slogdet(corr)[1]

    def __call__(self, u):
        z = special.ndtri(np.clip(u, 1e-300, 1.0 - 1e-16))
        quad = np.einsum("...i,ij,...j->...", z, self._prec, z)
        return np.exp(-0.5 * self._logdet - 0.5 * quad)


class InputSpace:
    """``d`` marginals plus a copula density on ``[0, 1]^d``.

    With the default copula the joint law is the independent product
    ``F_ind``.  A user copula density is checked by Monte Carlo to integrate to
    one (within three standard errors of a 4096-point pilot).
    """

    def __init__(
        self,
        marginals: Sequence[MarginalDistribution],
        copula_density: Callable | None = None,
        names: Sequence[str] | None = None,
    ):
        self.marginals = list(marginals)
        if not self.marginals:
            raise ValueError("an input space needs at least one marginal")
        self.copula_density = copula_density
        self.names = list(names) if names is not None else [f"X{j + 1}" for j in range(self.d)]
        if len(self.names) != self.d:
            raise DimensionMismatchError("one name per marginal is required")
        if copula_density is not None:
            self._check_copula()

    @property
    def d(self) -> int:
        return len(self.marginals)

    @property
    def independent(self) -> bool:
        return self.copula_density is None

    def _check_copula(self):
        gen = Stream(0, ("copula-check",)).generator()
        vals = np.asarray(self.copula_density(open_uniform(gen, (4096, self.d))), dtype=float)
        if np.any(~np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("copula density must be finite and non-negative")
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        if abs(vals.mean() - 1.0) > 3.0 * se + 1e-12:
            raise ValueError(f"copula density integrates to {vals.mean():.4f}, not 1")

    def cdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for j, dist in enumerate(self.marginals):
            out[..., j] = dist.cdf(x[..., j])
        return out

    def quantile(self, p: np.ndarray, columns: Sequence[int] | None = None) -> np.ndarray:
        """Componentwise quantile; ``columns`` says which marginal each last-axis slot uses."""
        p = np.asarray(p, dtype=float)
        cols = range(self.d) if columns is None else columns
        out = np.empty_like(p)
        for slot, j in enumerate(cols):
            dist = self.marginals[j]
            q = dist._ppf(p[..., slot])
            out[..., slot] = np.clip(q, -_BIG, _BIG) if dist.unbounded else q
        return out

    def copula(self, x: np.ndarray) -> np.ndarray:
        if self.copula_density is None:
            return np.ones(np.shape(x)[:-1])
        return np.asarray(self.copula_density(self.cdf(x)), dtype=float)

    def to_dict(self) -> dict:
        return {"marginals": [dict(m.to_dict(), name=n) for m, n in zip(self.marginals, self.names)]}


def draw(space: InputSpace, n: int, stream=None) -> np.ndarray:
    """``n`` points from the independent product law ``F_ind`` (copula ignored)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = as_stream(stream).generator()
    return space.quantile(open_uniform(gen, (n, space.d)))
