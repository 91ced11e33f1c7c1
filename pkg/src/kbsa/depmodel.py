"""Dependency models of weighted inputs.

Given a subset ``u`` of inputs and a permutation ``pi`` of the remaining ones,
a dependency model writes ``X_pi`` as a function of ``X_u`` and independent
uniforms by inverting, one coordinate after the other, the conditional CDF of
the weighted law.  Everything is expressed on the uniform scale ``z = F(x)``
of the initial marginals.

Three routes are available, tried in this order:

override
    a user-supplied closed form (e.g. :class:`QuadraticBallOverride`);
factorized
    the effective weight is a product of one-dimensional factors, so the
    weighted inputs are independent and each coordinate has its own 1-D
    weighted quantile (closed form for power factors, tabulated otherwise);
numerical
    each conditional CDF is estimated on a panel: a midpoint grid of ``P``
    cells for the coordinate being drawn, fresh uniforms for the coordinates
    still to come, effective weights as cell masses.  The resulting
    piecewise-linear CDF is monotone by construction and is inverted exactly.

Indices are 0-based throughout; ``u = ()`` gives the joint law of ``X^w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .exceptions import (
    DegenerateConditioningError,
    DimensionMismatchError,
    DomainError,
    RejectionStarvationError,
    ZeroDenominatorError,
)
from .marginals import Beta, BetaFirstKind, Uniform
from .streams import as_stream, open_uniform
from .weights import EffectiveWeight, PowerFactor

_REDRAWS = 8
_BLOCK = 1 << 21  # floats per vectorised weight evaluation
_TABLE_CELLS = 1 << 14


@dataclass(frozen=True)
class SubsetSpec:
    u: tuple
    pi: tuple

    @classmethod
    def of(cls, u: Sequence[int], d: int, pi: Sequence[int] | None = None) -> "SubsetSpec":
        u = tuple(sorted(int(j) for j in u))
        rest = tuple(j for j in range(d) if j not in u)
        pi = rest if pi is None else tuple(int(j) for j in pi)
        if len(set(u)) != len(u) or any(j < 0 or j >= d for j in u):
            raise ValueError(f"invalid subset {u} for d={d}")
        if sorted(pi) != list(rest):
            raise ValueError(f"pi must be a permutation of the complement {rest}")
        return cls(u, pi)

    @property
    def d(self) -> int:
        return len(self.u) + len(self.pi)


# ---------------------------------------------------------------------------
# closed-form overrides


def _semicircle_angle(b):
    """Solve ``psi + sin(psi) = b`` for ``psi`` in [-pi, pi] (vectorised Newton)."""
    b = np.asarray(b, dtype=float)
    s = np.sign(b)
    gap = np.pi - np.abs(b)
    # near the ends psi + sin psi ~ pi - e^3/6, near zero ~ 2 psi
    psi = np.where(gap < 1.0, s * (np.pi - np.cbrt(6.0 * gap)), 0.5 * b).ravel()
    bf = b.ravel()
    active = np.arange(psi.size)
    for _ in range(50):
        p = psi[active]
        f = p + np.sin(p) - bf[active]
        # the residual cannot go below rounding of b; stop there
        done = np.abs(f) <= 4e-16 * (1.0 + np.abs(bf[active]))
        fp = 1.0 + np.cos(p)
        step = np.where(done | (fp <= 0.0), 0.0, f / np.where(fp > 0.0, fp, 1.0))
        psi[active] = np.clip(p - step, -np.pi, np.pi)
        active = active[~(done | (np.abs(step) < 1e-15))]
        if active.size == 0:
            break
    return psi.reshape(b.shape)


class QuadraticBallOverride:
    """Dependency model of the uniform law on the ball ``{x in R^3 : |x|^2 <= c}``.

    Conditionally on the coordinates already known, with ``rho^2`` the
    remaining squared radius and ``k`` coordinates left, the next coordinate
    has density proportional to ``(rho^2 - x^2)^((k - 1) / 2)``: a parabola
    (``k = 3``), a semicircle (``k = 2``) or a uniform law (``k = 1``).  In
    squares this is ``X_1^2 / c ~ Beta(1/2, 2)``, ``Z_2 ~ Beta(1/2, 3/2)``,
    ``Z_3 ~ Beta(1/2, 1)``.
    """

    def __init__(self, c: float = 1.0):
        if not c > 0:
            raise ValueError("threshold c must be positive")
        self.c = float(c)

    @staticmethod
    def _next(rho2, k, p):
        rho = np.sqrt(np.maximum(rho2, 0.0))
        if k == 3:
            s = 2.0 * np.cos((np.arccos(1.0 - 2.0 * p) + 4.0 * np.pi) / 3.0)
            return rho * s
        if k == 2:
            return rho * np.sin(0.5 * _semicircle_angle(np.pi * (2.0 * p - 1.0)))
        if k == 1:
            return rho * (2.0 * p - 1.0)
        raise ValueError("the ball override supports at most three coordinates")

    def transform(self, subset: SubsetSpec, x_u: np.ndarray, U: np.ndarray) -> np.ndarray:
        if subset.d != 3:
            raise DimensionMismatchError("the ball override is defined for d = 3")
        rho2 = self.c - np.sum(x_u * x_u, axis=-1)
        if np.any(rho2 < 0):
            raise DegenerateConditioningError("conditioning point lies outside the ball")
        k = len(subset.pi)
        out = np.empty(np.broadcast_shapes(rho2.shape, U.shape[:-1]) + (k,))
        for pos in range(k):
            x = self._next(rho2, k - pos, U[..., pos])
            out[..., pos] = x
            rho2 = rho2 - x * x
        return out


# ---------------------------------------------------------------------------
# one-dimensional weighted quantiles (factorized route)


class _WeightedMarginal:
    """Quantile of the law with density proportional to ``factor(x) * rho_j(x)``."""

    def __init__(self, dist, factor):
        self.dist, self.factor = dist, factor
        self.kind = "plain"
        if factor is None:
            return
        if isinstance(factor, PowerFactor):
            a = factor.alpha
            if a == 0.0:
                return
            if isinstance(dist, Uniform) and dist.lo >= 0.0:
                self.kind = "uniform-power"
                return
            if isinstance(dist, (Beta, BetaFirstKind)):
                self.kind = "beta-power"
                return
        self.kind = "table"
        z_edges = np.linspace(0.0, 1.0, _TABLE_CELLS + 1)
        z_mid = 0.5 * (z_edges[1:] + z_edges[:-1])
        mass = np.asarray(factor(dist.quantile(z_mid)), dtype=float)
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise DomainError("weight factor must be finite and non-negative")
        cum = np.concatenate([[0.0], np.cumsum(mass)])
        if cum[-1] <= 0:
            raise DegenerateConditioningError("weight factor vanishes on the support of the marginal")
        self._cum = cum / cum[-1]
        self._z = z_edges

    def ppf(self, p):
        dist = self.dist
        if self.kind == "plain":
            return dist.quantile(p)
        if self.kind == "uniform-power":
            e = self.factor.alpha + 1.0
            if dist.lo == 0.0:
                return dist.hi * np.power(p, 1.0 / e)
            lo, hi = dist.lo**e, dist.hi**e
            return np.power(lo + p * (hi - lo), 1.0 / e)
        if self.kind == "beta-power":
            a = dist.a + self.factor.alpha
            t = special.betaincinv(a, dist.b, p)
            return t * dist.c if isinstance(dist, BetaFirstKind) else t
        z = _invert_cum(self._cum[None, :], np.atleast_1d(np.asarray(p, dtype=float))[None, :])[0]
        return dist.quantile(z.reshape(np.shape(p)))


def _invert_cum(cum: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Invert piecewise-linear CDFs on a uniform grid.

    ``cum`` has shape (n, P + 1), non-decreasing from 0 to 1 per row; ``p`` has
    shape (n, C) with entries in (0, 1).  Returns ``z`` of shape (n, C).
    """
    n, P1 = cum.shape
    P = P1 - 1
    offset = 2.0 * np.arange(n)[:, None]
    flat = (cum + offset).ravel()
    idx = np.searchsorted(flat, (p + offset).ravel(), side="right").reshape(p.shape) - 1
    local = np.clip(idx - (P1 * np.arange(n))[:, None], 0, P - 1)
    rows = np.arange(n)[:, None]
    c0 = cum[rows, local]
    c1 = cum[rows, local + 1]
    frac = np.clip((p - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.0, 1.0)
    # a cell next to a massless one straddles the edge of the support: only the
    # half between its midpoint (known to carry weight) and the massive side is used
    no_prev = (local > 0) & (c0 <= cum[rows, np.maximum(local - 1, 0)])
    no_next = (local < P - 1) & (cum[rows, np.minimum(local + 2, P)] <= c1)
    frac = np.where(no_prev & no_next, 0.5, np.where(no_prev, 0.5 + 0.5 * frac, np.where(no_next, 0.5 * frac, frac)))
    return (local + frac) / P


# ---------------------------------------------------------------------------


class DependencyModel:
    """Conditional sampler of ``X^w_pi`` given ``X^w_u = x_u``."""

    def __init__(
        self,
        ew: EffectiveWeight,
        subset: SubsetSpec,
        inner_mc: int = 2000,
        inversion_tol: float = 1e-3,
        override=None,
        force_numerical: bool = False,
    ):
        if inner_mc < 100:
            raise ValueError("inner_mc must be at least 100")
        if not (0 < inversion_tol <= 1e-3):
            raise ValueError("inversion_tol must lie in (0, 1e-3]")
        if subset.d != ew.d:
            raise DimensionMismatchError(f"subset is over {subset.d} inputs, weight over {ew.d}")
        self.ew, self.subset = ew, subset
        self.inner_mc, self.inversion_tol = int(inner_mc), float(inversion_tol)
        self.override = override
        self.space = ew.space
        self._factors = None if force_numerical else ew.factors()
        self._marg: dict[int, _WeightedMarginal] = {}
        if override is not None and not force_numerical:
            self.route = "override"
        elif self._factors is not None:
            self.route = "factorized"
        else:
            self.route = "numerical"

    def with_subset(self, subset: SubsetSpec) -> "DependencyModel":
        dm = DependencyModel.__new__(DependencyModel)
        dm.__dict__.update(self.__dict__)
        dm.subset = subset
        return dm

    # factorized route

    def weighted_marginal(self, j: int) -> _WeightedMarginal:
        if j not in self._marg:
            f = self._factors[j] if j < len(self._factors) else None
            self._marg[j] = _WeightedMarginal(self.space.marginals[j], f)
        return self._marg[j]

    # numerical route

    def _fill(self, base: np.ndarray, pos: int, P: int, gen) -> np.ndarray:
        """Effective weights of a step-``pos`` panel for each row of ``base``: shape (n, P)."""
        pi = self.subset.pi
        n, d = base.shape
        j = pi[pos]
        t = (np.arange(P) + 0.5) / P
        xj = self.space.quantile(t[:, None], [j])[:, 0]
        rest = list(pi[pos + 1 :])
        out = np.empty((n, P))
        rows_per = max(1, _BLOCK // (P * d))
        for s in range(0, n, rows_per):
            b = base[s : s + rows_per]
            x = np.repeat(b[:, None, :], P, axis=1)
            x[:, :, j] = xj[None, :]
            if rest:
                v = open_uniform(gen, (len(b), P, len(rest)))
                x[:, :, rest] = self.space.quantile(v, rest)
            out[s : s + rows_per] = np.asarray(self.ew(x.reshape(-1, d)), dtype=float).reshape(len(b), P)
        return out

    def _step(self, base: np.ndarray, pos: int, p: np.ndarray, gen) -> tuple[np.ndarray, np.ndarray]:
        """Conditional quantiles on the uniform scale for step ``pos``; ``p`` is (n, C).

        Also returns the rows whose conditional law showed no mass on any grid.
        """
        rows = max(1, _BLOCK // self.inner_mc)
        if len(base) > rows:
            parts = [self._step(base[s : s + rows], pos, p[s : s + rows], gen) for s in range(0, len(base), rows)]
            return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])
        z = np.full(p.shape, np.nan)
        dead = np.zeros(len(base), dtype=bool)
        todo = np.arange(len(base))
        P = self.inner_mc
        for attempt in range(4):
            w = self._fill(base[todo], pos, P, gen)
            cum = np.empty((len(todo), P + 1))
            cum[:, 0] = 0.0
            np.cumsum(w, axis=1, out=cum[:, 1:])
            tot = cum[:, -1].copy()
            ok = tot > 0
            if np.any(ok):
                c = cum[ok] if not ok.all() else cum
                c /= tot[ok, None]
                z[todo[ok]] = _invert_cum(c, p[todo[ok]])
            todo = todo[~ok]
            if len(todo) == 0:
                return z, dead
            P *= 4
        dead[todo] = True
        return z, dead

    def _no_mass(self, base: np.ndarray, dead: np.ndarray, pos: int):
        x_bad = base[np.flatnonzero(dead)[0], list(self.subset.u)]
        raise DegenerateConditioningError(
            f"conditional law has no mass at x_u={x_bad.tolist()} (step {pos} of pi={self.subset.pi})"
        )

    def _numerical(self, x_u: np.ndarray, U: np.ndarray, gen) -> np.ndarray:
        """``x_u`` (R, |u|) with ``U`` (R, C, k), sharing the first step per row."""
        R, C, k = U.shape
        d = self.subset.d
        u, pi = list(self.subset.u), self.subset.pi
        base = np.zeros((R, d))
        base[:, u] = x_u
        z = np.empty((R, C, k))
        z[:, :, 0], dead = self._step(base, 0, U[:, :, 0], gen)
        if dead.any():
            self._no_mass(base, dead, 0)
        if k > 1:
            cells = np.repeat(base[:, None, :], C, axis=1).reshape(R * C, d)
            zc = z.reshape(R * C, k)
            Uc = U.reshape(R * C, k)
            for pos in range(1, k):
                prev = pi[pos - 1]
                cells[:, prev] = self.space.quantile(zc[:, pos - 1 : pos], [prev])[:, 0]
                step, dead = self._step(cells, pos, Uc[:, pos : pos + 1], gen)
                zc[:, pos] = step[:, 0]
                # a draw in a grid cell straddling the edge of the support can leave
                # no mass for the next coordinate: redraw the previous coordinate
                for _ in range(_REDRAWS):
                    if not dead.any():
                        break
                    idx = np.flatnonzero(dead)
                    again, _ = self._step(cells[idx], pos - 1, open_uniform(gen, (len(idx), 1)), gen)
                    keep = ~np.isnan(again[:, 0])
                    idx, again = idx[keep], again[keep]
                    zc[idx, pos - 1] = again[:, 0]
                    cells[idx, prev] = self.space.quantile(again, [prev])[:, 0]
                    step, still = self._step(cells[idx], pos, Uc[idx, pos : pos + 1], gen)
                    zc[idx, pos] = step[:, 0]
                    dead[idx] = still
                if dead.any():
                    self._no_mass(cells, dead, pos)
        return self.space.quantile(z, pi)

    # public

    def transform(self, x_u, U, stream=None) -> np.ndarray:
        """Draw ``X_pi`` given ``X_u = x_u`` from uniforms ``U``; result is in ``pi`` order.

        Shapes: ``x_u`` (n, |u|) with ``U`` (n, k) gives (n, k); ``x_u`` (R, |u|)
        with ``U`` (R, C, k) gives (R, C, k), every column of a row sharing ``x_u``.
        """
        U = np.asarray(U, dtype=float)
        x_u = np.asarray(x_u, dtype=float)
        k = len(self.subset.pi)
        if U.shape[-1] != k or x_u.shape[-1] != len(self.subset.u):
            raise DimensionMismatchError("x_u / uniforms do not match the subset")
        if np.any(U <= 0.0) or np.any(U >= 1.0):
            raise DomainError("uniforms must lie strictly inside (0, 1)")
        grid = U.ndim == 3
        if k == 0:
            return np.empty(U.shape)
        if self.route == "override":
            xu = x_u[:, None, :] if grid else x_u
            return self.override.transform(self.subset, xu, U)
        if self.route == "factorized":
            out = np.empty(U.shape)
            for pos, j in enumerate(self.subset.pi):
                out[..., pos] = self.weighted_marginal(j).ppf(U[..., pos])
            return out
        gen = as_stream(stream).generator()
        if grid:
            return self._numerical(x_u, U, gen)
        return self._numerical(x_u, U[:, None, :], gen)[:, 0, :]

    def assemble(self, x_u: np.ndarray, x_pi: np.ndarray) -> np.ndarray:
        """Full input vectors from ``x_u`` and a transform result (broadcasting grids)."""
        shape = x_pi.shape[:-1]
        out = np.empty(shape + (self.subset.d,))
        if x_pi.ndim == 3 and x_u.ndim == 2:
            x_u = x_u[:, None, :]
        out[..., list(self.subset.u)] = x_u
        out[..., list(self.subset.pi)] = x_pi
        return out


def conditional_cdf_w(dm: DependencyModel, x_u, levels, stream=None) -> float:
    """Monte Carlo estimate of ``W(levels; x_u)``.

    ``W = E[w_e(x_u, F^-1(V))] / E[w_e(x_u, F^-1(U))] * prod(levels)`` with
    ``V_k ~ U(0, levels_k)``, both expectations on one shared uniform panel.
    """
    levels = np.asarray(levels, dtype=float)
    pi, u = dm.subset.pi, list(dm.subset.u)
    if levels.shape != (len(pi),) or np.any(levels < 0) or np.any(levels > 1):
        raise DomainError("levels must be a vector in [0, 1]^|pi|")
    if np.any(levels == 0):
        return 0.0
    gen = as_stream(stream).generator()
    panel = open_uniform(gen, (dm.inner_mc, len(pi)))
    x = np.empty((dm.inner_mc, dm.subset.d))
    x[:, u] = np.asarray(x_u, dtype=float)
    x[:, list(pi)] = dm.space.quantile(panel, pi)
    den = math.fsum(dm.ew(x))
    if den <= 0:
        raise ZeroDenominatorError(f"effective weight vanishes given x_u={list(np.atleast_1d(x_u))}")
    if np.all(levels == 1):
        return 1.0
    x[:, list(pi)] = dm.space.quantile(panel * levels, pi)
    num = math.fsum(dm.ew(x))
    return float(min(1.0, max(0.0, num / den * float(np.prod(levels)))))


def _prev_base(dm: DependencyModel, x_u, z_prev):
    pi = dm.subset.pi
    base = np.zeros((1, dm.subset.d))
    base[0, list(dm.subset.u)] = np.asarray(x_u, dtype=float)
    z_prev = np.atleast_1d(np.asarray(z_prev, dtype=float))
    if len(z_prev):
        base[0, list(pi[: len(z_prev)])] = dm.space.quantile(z_prev[None, :], pi[: len(z_prev)])[0]
    return base


def conditional_quantile(dm: DependencyModel, k: int, x_u, z_prev, p, stream=None) -> float:
    """Uniform-scale quantile of the ``k``-th coordinate of ``pi`` (0-based) given the earlier ones."""
    if not 0.0 < p < 1.0:
        raise DomainError("p must lie in (0, 1)")
    if len(np.atleast_1d(z_prev)) != k:
        raise DimensionMismatchError("z_prev must hold the k earlier coordinates")
    gen = as_stream(stream).generator()
    base = _prev_base(dm, x_u, z_prev)
    z, dead = dm._step(base, k, np.array([[p]]), gen)
    if dead.any():
        dm._no_mass(base, dead, k)
    return float(z[0, 0])


def conditional_cdf(dm: DependencyModel, k: int, x_u, z_prev, z, stream=None) -> float:
    """The empirical conditional CDF inverted by :func:`conditional_quantile` (same stream, same panel)."""
    gen = as_stream(stream).generator()
    w = dm._fill(_prev_base(dm, x_u, z_prev), k, dm.inner_mc, gen)[0]
    cum = np.concatenate([[0.0], np.cumsum(w)])
    if cum[-1] <= 0:
        raise DegenerateConditioningError("conditional law has no mass")
    grid = np.linspace(0.0, 1.0, dm.inner_mc + 1)
    return float(np.interp(z, grid, cum / cum[-1]))


def dependency_transform(dm: DependencyModel, x_u, uniforms, stream=None) -> np.ndarray:
    return dm.transform(x_u, uniforms, stream)


# ---------------------------------------------------------------------------
# sampling the weighted law


def sample_route(dm: DependencyModel) -> str:
    ew = dm.ew
    if dm.route in ("override", "factorized"):
        return dm.route
    if ew.binary or ew.upper_bound is not None:
        return "rejection"
    return "numerical"


def _rejection(ew: EffectiveWeight, n: int, stream, pilot: int = 20000) -> np.ndarray:
    st = as_stream(stream)
    bound = 1.0 if ew.binary else ew.upper_bound
    kept, have, batch = [], 0, 0
    size = pilot
    while have < n:
        gen = st.child("rejection", batch).generator()
        y = ew.space.quantile(open_uniform(gen, (size, ew.d)))
        w = np.asarray(ew(y), dtype=float)
        acc = w > 0 if ew.binary else open_uniform(gen, size) * bound < w
        rate = float(np.mean(acc))
        if batch == 0 and rate < 1e-4:
            raise RejectionStarvationError(f"acceptance rate {rate:.2e} below 1e-4 on a {pilot}-point pilot")
        kept.append(y[acc])
        have += int(acc.sum())
        batch += 1
        size = int(min(max(pilot, 1.2 * (n - have) / max(rate, 1e-4)), 1 << 22))
    return np.concatenate(kept)[:n]


def sample_target(dm: DependencyModel, n: int, stream=None, route: str | None = None) -> np.ndarray:
    """``n`` draws of ``X^w`` (all ``d`` coordinates, natural order)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    full = dm if len(dm.subset.u) == 0 else dm.with_subset(SubsetSpec.of((), dm.subset.d, dm.subset.u + dm.subset.pi))
    route = route or sample_route(full)
    st = as_stream(stream)
    if route == "rejection":
        return _rejection(full.ew, n, st)
    if route == "numerical" and full.route != "numerical":
        full = DependencyModel(full.ew, full.subset, full.inner_mc, full.inversion_tol, force_numerical=True)
    U = open_uniform(st.child("target-u").generator(), (n, full.subset.d))
    x_pi = full.transform(np.empty((n, 0)), U, st.child("target-inner"))
    return full.assemble(np.empty((n, 0)), x_pi)
