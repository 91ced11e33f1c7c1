"""Sensitivity functionals and kernel-based sensitivity indices.

For a subset ``u`` and an SPD kernel ``k`` the engine estimates

* the first-order index, from ``fo(Y_u) = mu(Y_u) - mu``;
* the total index, from ``tot(Y_u, U) = M(Y_u, r(Y_u, U)) - mu(U)``;
* the upper bound ``Upsilon``, from ``M*(Y_u, Y'_u, U)``, the difference of two
  evaluations sharing the uniforms ``U``,

each as a mean of ``k(F_i, F'_i)`` over ``m`` independent pairs divided by the
centred-output normaliser ``mu_c`` (``mu_c * E[w_e]^2`` for ``Upsilon``).

Two sampling routes exist.  *direct* draws ``Y`` from the weighted law
itself (every weight is 1).  *reweight* draws ``Y`` from the independent
product law and carries ``w_e(Y)`` factors in every summand and in the
normaliser.  ``auto`` picks *direct* whenever an exact sampler of the weighted
law is available (closed form, factorized weight, or rejection).

Randomness comes from counter-based streams keyed by (subset, kind, chunk),
and all reductions use ``math.fsum``, so results do not depend on the number
of threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special
from scipy.stats import qmc

from .depmodel import DependencyModel, SubsetSpec, sample_route, sample_target
from .exceptions import NonFiniteValueError, ZeroDenominatorError
from .kernels import KernelSpec
from .marginals import draw
from .streams import Stream, as_stream, open_uniform
from .weights import EffectiveWeight

INDEX_KINDS = ("first_order", "total", "upsilon")


@dataclass(frozen=True)
class EstimatorConfig:
    m1: int = 500
    m: int = 5000
    M: int = 50000
    base_seed: int = 0
    confidence: float = 0.95
    route: str = "auto"
    inner_mc: int = 2000
    inversion_tol: float = 1e-3
    threads: int = 1
    chunk: int = 256
    m_upsilon: int | None = None

    def __post_init__(self):
        if min(self.m1, self.m, self.M) < 2:
            raise ValueError("m1, m and M must all be >= 2")
        if self.M < 10 * self.m or self.M < 10 * self.m1:
            raise ValueError(f"M={self.M} must be at least 10*m and 10*m1 (m={self.m}, m1={self.m1})")
        if self.m_upsilon is not None and not 2 <= self.m_upsilon <= self.M // 10:
            raise ValueError(f"m_upsilon={self.m_upsilon} must lie in [2, M/10]")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.route not in ("auto", "direct", "reweight"):
            raise ValueError("route must be auto, direct or reweight")
        if self.threads < 1 or self.chunk < 1:
            raise ValueError("threads and chunk must be positive")

    def replace(self, **changes) -> "EstimatorConfig":
        return EstimatorConfig(**{**asdict(self), **changes})

    def outer(self, kind: str) -> int:
        """Outer pair count for an index kind; the bound needs only 4 model runs per pair."""
        if kind == "upsilon" and self.m_upsilon is not None:
            return self.m_upsilon
        return self.m


@dataclass(frozen=True)
class IndexEstimate:
    kind: str
    u: tuple
    kernel: str
    value: float
    std_error: float
    ci_lo: float
    ci_hi: float
    m1: int
    m: int
    M: int
    seed: int
    flags: tuple = ()

    @property
    def sqrt_value(self) -> float:
        return math.sqrt(max(self.value, 0.0))

    @property
    def sqrt_std_error(self) -> float:
        """Delta-method standard error of the square root."""
        r = self.sqrt_value
        return self.std_error / (2.0 * r) if r > 0 else math.sqrt(self.std_error)

    @property
    def ci(self) -> tuple[float, float]:
        return self.ci_lo, self.ci_hi

    @property
    def samples_used(self) -> tuple[int, int, int]:
        return self.m1, self.m, self.M

    def to_record(self, names: Sequence[str] | None = None) -> dict:
        u = [names[j] for j in self.u] if names else [j + 1 for j in self.u]
        return {
            "u": "+".join(map(str, u)),
            "kernel": self.kernel,
            "kind": self.kind,
            "value": self.value,
            "sqrt_value": self.sqrt_value,
            "std_error": self.std_error,
            "sqrt_std_error": self.sqrt_std_error,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "m1": self.m1,
            "m": self.m,
            "M": self.M,
            "seed": self.seed,
            "flags": ";".join(self.flags),
        }


@dataclass
class Denominator:
    kernel: str
    value: float
    std_error: float
    ew_mean: float


@dataclass
class AnalysisResult:
    estimates: list
    denominators: dict
    mu: np.ndarray
    route: str
    dependency_route: str
    evaluations: dict = field(default_factory=dict)

    def get(self, kind: str, u, kernel: str) -> IndexEstimate:
        u = tuple(u)
        for e in self.estimates:
            if e.kind == kind and e.u == u and e.kernel == kernel:
                return e
        raise KeyError((kind, u, kernel))


# ---------------------------------------------------------------------------
# moments and functionals


def inner_uniforms(gen: np.random.Generator, n: int, m1: int, k: int) -> np.ndarray:
    """``(n, m1, k)`` inner designs: one scrambled Sobol set, rotated by an independent uniform shift per row.

    Every point is U(0,1)^k, so each row's inner mean stays unbiased and rows
    stay uncorrelated, while the inner error is far below i.i.d. sampling.
    That error enters the first-order functional through a nonlinear kernel
    feature, so lowering it lowers the plug-in bias.
    """
    # leading m1 points of a power-of-two set (m1 need not be a power of two)
    base = qmc.Sobol(k, scramble=True, seed=gen).random_base2(max(0, math.ceil(math.log2(m1))))[:m1]
    U = (base[None] + gen.random((n, 1, k))) % 1.0
    return np.clip(U, 2.0**-53, 1.0 - 2.0**-53)


def inner_mean_given_xu(model, dm: DependencyModel, y_u, m1: int, stream) -> np.ndarray:
    """``mu(y_u) = (1/m1) sum_t M(y_u, r(y_u, U_t))`` for each row of ``y_u``: shape (n, T, N)."""
    st = as_stream(stream).child("inner")
    y_u = np.atleast_2d(np.asarray(y_u, dtype=float))
    n, k, d = len(y_u), len(dm.subset.pi), dm.subset.d
    if k == 0:
        return model.evaluate_grid(dm.assemble(y_u, np.empty((n, 0))))
    U = inner_uniforms(st.child("U").generator(), n, m1, k)
    x = dm.assemble(y_u, dm.transform(y_u, U, st.child("dep")))
    out = model.evaluate_grid(x.reshape(n * m1, d))
    return out.reshape((n, m1) + out.shape[1:]).mean(axis=1)


def inner_mean_given_u(model, dm: DependencyModel, U, panel_yu, panel_w, stream) -> np.ndarray:
    """``mu(U) = sum_t M(Y_t,u, r(Y_t,u, U)) w_t / sum_t w_t`` per row of ``U``; panel shape (n, m1, |u|)."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n, m1 = panel_yu.shape[:2]
    d = dm.subset.d
    flat_yu = panel_yu.reshape(n * m1, -1)
    flat_U = np.repeat(U, m1, axis=0)
    x = dm.assemble(flat_yu, dm.transform(flat_yu, flat_U, stream))
    out = model.evaluate_grid(x.reshape(n * m1, d))
    out = out.reshape((n, m1) + out.shape[1:])
    w = np.asarray(panel_w, dtype=float)
    tot = w.sum(axis=1)
    if np.any(tot <= 0):
        raise ZeroDenominatorError("all weights in an inner panel are zero")
    return np.einsum("nt...,nt->n...", out, w) / tot.reshape((n,) + (1,) * (out.ndim - 2))


def overall_mean(outputs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``mu = sum_i M_i w_i / sum_i w_i`` over the first axis, exactly rounded."""
    outputs = np.asarray(outputs, dtype=float)
    w = np.asarray(weights, dtype=float)
    tot = math.fsum(w)
    if not tot > 0:
        raise ZeroDenominatorError("all weights are zero")
    flat = outputs.reshape(len(outputs), -1)
    if np.all(w == 1.0):
        sums = [math.fsum(flat[:, j]) for j in range(flat.shape[1])]
    else:
        sums = [math.fsum(flat[:, j] * w) for j in range(flat.shape[1])]
    return (np.array(sums) / tot).reshape(outputs.shape[1:])


def moment_means(model, dm: DependencyModel, y_u, U, panel_yu, panel_w, m1: int, outputs, weights, stream):
    """The three moment estimators ``(mu(Y_u), mu(U), mu)``."""
    st = as_stream(stream)
    return (
        inner_mean_given_xu(model, dm, y_u, m1, st.child("mu-yu")),
        inner_mean_given_u(model, dm, U, panel_yu, panel_w, st.child("mu-u")),
        overall_mean(outputs, weights),
    )


def sf_eval(which: str, a, b):
    """Sensitivity functionals from their ingredients.

    ``first_order``: ``a = mu(Y_u)``, ``b = mu``; ``total``: ``a = M(Y_u, r(Y_u, U))``,
    ``b = mu(U)``; ``centered``: ``a = M``, ``b = mu``; ``star``: ``a``, ``b`` two
    evaluations sharing ``U``.  All four are the difference ``a - b``.
    """
    if which not in ("first_order", "total", "centered", "star"):
        raise ValueError(f"unknown functional {which!r}")
    return np.asarray(a, dtype=float) - np.asarray(b, dtype=float)


def asymptotic_ci(summands, denominator: float, level: float = 0.95, estimate: float | None = None):
    """``estimate +/- z * sd(summands) / (sqrt(m) * denominator)``."""
    s = np.asarray(summands, dtype=float)
    m = len(s)
    if m < 2:
        raise ValueError("need at least two summands")
    if estimate is None:
        estimate = math.fsum(s) / m / denominator
    z = float(special.ndtri(0.5 + 0.5 * level))
    half = z * _se(s) / denominator
    return estimate - half, estimate + half


def pair_projection(kernel: KernelSpec, stars, weights, omega) -> np.ndarray:
    """``h_i = (1/(N-1)) sum_{j != i} k(s_i, s_j) W_i W_j`` for ``N`` i.i.d. values ``s_i``.

    ``stars`` has shape (N, T, N_out), ``weights`` shape (N,); the kernel is
    integrated over theta with ``omega``.  The mean of ``h`` is the U-statistic
    over all pairs, and ``2 h_i`` is its first-order projection, so
    ``h_i + h_{i+m} - mean(h)`` are per-pair summands with the U-statistic's
    mean and asymptotic variance.  Both kernel families factorize, so the cost is
    linear in ``N``.
    """
    stars = np.asarray(stars, dtype=float)
    w = np.asarray(weights, dtype=float)
    N = len(stars)
    if N < 2:
        raise ValueError("need at least two values")
    if kernel.kind == "quadratic":
        G = np.einsum("itc,ite->tce", stars * w[:, None, None], stars)
        quad = np.einsum("itc,tce,ite->it", stars, G, stars)
        own = w[:, None] * (stars * stars).sum(axis=-1) ** 2
        h = w[:, None] * (quad - own)
    else:
        f = kernel.feature(stars) * w[:, None]
        h = f * (f.sum(axis=0) - f)
    return (h @ omega) / (N - 1)


def _se(s: np.ndarray) -> float:
    if np.all(s == s[0]):
        return 0.0
    return float(np.std(s, ddof=1) / math.sqrt(len(s)))


# ---------------------------------------------------------------------------
# engine


class _Engine:
    def __init__(self, model, ew: EffectiveWeight, kernels, config: EstimatorConfig, override=None, pi=None):
        self.model, self.ew, self.cfg = model, ew, config
        self.kernels = list(kernels)
        if model.d != ew.d:
            raise ValueError(f"model has {model.d} inputs, the input space {ew.d}")
        self.d = model.d
        self.pi = pi
        self.root = Stream(config.base_seed)
        self.base_dm = DependencyModel(ew, SubsetSpec.of((), self.d), config.inner_mc, config.inversion_tol, override)
        exact = sample_route(self.base_dm) != "numerical"
        if config.route == "auto":
            self.route = "direct" if exact else "reweight"
        else:
            self.route = config.route
        grid = model.theta_grid
        self.omega = np.ones(1) if grid is None else grid.normalized_weights()
        self._den = None

    def dm_for(self, u) -> DependencyModel:
        pi = None
        if self.pi is not None:
            pi = [j for j in self.pi if j not in u]
        return self.base_dm.with_subset(SubsetSpec.of(u, self.d, pi))

    def draw(self, n: int, stream: Stream):
        """``n`` full input vectors and their weights for the current route."""
        if self.route == "direct":
            return sample_target(self.base_dm, n, stream), np.ones(n)
        y = draw(self.ew.space, n, stream)
        return y, np.asarray(self.ew(y), dtype=float)

    def ksum(self, kernel: KernelSpec, a, b) -> np.ndarray:
        v = kernel.pairwise(a, b) @ self.omega
        if not np.all(np.isfinite(v)):
            raise NonFiniteValueError(f"kernel {kernel.label} produced a non-finite value")
        return v

    # denominator

    def denominator(self):
        if self._den is not None:
            return self._den
        cfg, M = self.cfg, self.cfg.M
        with self.model.meter.phase("denominator"):
            y, w = self.draw(2 * M, self.root.child("denominator"))
            out = self.model.evaluate_grid(y)
        self.mu = overall_mean(out, w)
        ew_mean = math.fsum(w) / len(w)
        mc = out - self.mu
        dens = {}
        for k in self.kernels:
            s = self.ksum(k, mc[:M], mc[M:]) * (w[:M] * w[M:])
            dens[k.label] = Denominator(k.label, math.fsum(s) / M, _se(s), ew_mean)
        self._den = dens
        return dens

    # chunks: each returns {kernel label: summands}

    def _outputs(self, dm, y_u, U, stream):
        x = dm.assemble(y_u, dm.transform(y_u, U, stream))
        return self.model.evaluate_grid(x)

    def chunk_first_order(self, dm, n, st):
        y, w = self.draw(2 * n, st.child("y"))
        u = list(dm.subset.u)
        live = w > 0
        mu_yu = np.zeros((2 * n,) + self.mu.shape)
        if np.any(live):
            mu_yu[live] = inner_mean_given_xu(self.model, dm, y[live][:, u], self.cfg.m1, st)
        fo = sf_eval("first_order", mu_yu, self.mu)
        ww = w[:n] * w[n:]
        return {k.label: self.ksum(k, fo[:n], fo[n:]) * ww for k in self.kernels}

    def chunk_total(self, dm, n, st):
        m1 = self.cfg.m1
        u = list(dm.subset.u)
        k_pi = len(dm.subset.pi)
        y, w = self.draw(2 * n, st.child("y"))
        U = open_uniform(st.child("U").generator(), (2 * n, k_pi))
        py, pw = self.draw(2 * n * m1, st.child("panel"))
        py = py[:, u].reshape(2 * n, m1, len(u))
        pw = pw.reshape(2 * n, m1)
        live = w > 0
        tot = np.zeros((2 * n,) + self.mu.shape)
        if np.any(live):
            here = self._outputs(dm, y[live][:, u], U[live], st.child("dep"))
            mu_u = inner_mean_given_u(self.model, dm, U[live], py[live], pw[live], st.child("dep-panel"))
            tot[live] = sf_eval("total", here, mu_u)
        ww = w[:n] * w[n:]
        return {k.label: self.ksum(k, tot[:n], tot[n:]) * ww for k in self.kernels}

    def chunk_upsilon(self, dm, n, st):
        """Two batches of ``n`` independent ``M*`` values with their weights (no kernel applied yet)."""
        u = list(dm.subset.u)
        k_pi = len(dm.subset.pi)
        y, w = self.draw(4 * n, st.child("y"))
        U = open_uniform(st.child("U").generator(), (n, k_pi))
        U = np.concatenate([U, U, *(2 * [open_uniform(st.child("U2").generator(), (n, k_pi))])])
        live = w > 0
        vals = np.zeros((4 * n,) + self.mu.shape)
        if np.any(live):
            vals[live] = self._outputs(dm, y[live][:, u], U[live], st.child("dep"))
        s1 = sf_eval("star", vals[:n], vals[n : 2 * n])
        s2 = sf_eval("star", vals[2 * n : 3 * n], vals[3 * n :])
        return {"a": s1, "wa": w[:n] * w[n : 2 * n], "b": s2, "wb": w[2 * n : 3 * n] * w[3 * n :]}

    # driver

    def summands(self, kind: str, u) -> dict:
        dm = self.dm_for(u)
        fn = {"first_order": self.chunk_first_order, "total": self.chunk_total, "upsilon": self.chunk_upsilon}[kind]
        m, size = self.cfg.outer(kind), self.cfg.chunk
        starts = list(range(0, m, size))
        ukey = "u:" + ",".join(map(str, u))
        self.denominator()

        def job(c):
            s = starts[c]
            return fn(dm, min(size, m - s), self.root.child(ukey, kind, c))

        with self.model.meter.phase(kind):
            if self.cfg.threads > 1 and len(starts) > 1:
                with ThreadPoolExecutor(max_workers=self.cfg.threads) as ex:
                    parts = list(ex.map(job, range(len(starts))))
            else:
                parts = [job(c) for c in range(len(starts))]
        if kind == "upsilon":
            a, wa, b, wb = (np.concatenate([p[key] for p in parts]) for key in ("a", "wa", "b", "wb"))
            return {k.label: self.upsilon_summands(k, a, wa, b, wb) for k in self.kernels}
        return {k.label: np.concatenate([p[k.label] for p in parts]) for k in self.kernels}

    def upsilon_summands(self, kernel: KernelSpec, a, wa, b, wb) -> np.ndarray:
        """Per-pair summands of the all-pairs Upsilon numerator (see :func:`pair_projection`)."""
        h = pair_projection(kernel, np.concatenate([a, b]), np.concatenate([wa, wb]), self.omega)
        if not np.all(np.isfinite(h)):
            raise NonFiniteValueError(f"kernel {kernel.label} produced a non-finite value")
        m = len(a)
        return h[:m] + h[m:] - math.fsum(h) / len(h)

    def finish(self, kind: str, u, kernel: KernelSpec, s: np.ndarray) -> IndexEstimate:
        cfg = self.cfg
        den = self._den[kernel.label]
        scale = den.value * (den.ew_mean**2 if kind == "upsilon" else 1.0)
        flags = []
        num = math.fsum(s) / len(s)
        if not scale > 0:
            if kind == "upsilon" and num == 0.0:
                return IndexEstimate(kind, tuple(u), kernel.label, 0.0, 0.0, 0.0, 0.0, cfg.m1, len(s), cfg.M,
                                     cfg.base_seed, ("zero-denominator",))
            raise ZeroDenominatorError(
                f"centred-output normaliser is {den.value!r} for kernel {kernel.label}: outputs do not vary under the weighted law"
            )
        raw = num / scale
        lo, hi = asymptotic_ci(s, scale, cfg.confidence, raw)
        se = _se(s) / scale
        value = raw
        if raw < 0:
            value = 0.0
            hi = max(hi, 0.0)
            flags.append("clamped-negative")
        if kind == "upsilon":
            flags.append("ci-from-own-summands")
        if len(s) < 30:
            flags.append("small-m")
        return IndexEstimate(kind, tuple(u), kernel.label, value, se, lo, hi, cfg.m1, len(s), cfg.M, cfg.base_seed, tuple(flags))


def analyze(
    model,
    ew: EffectiveWeight,
    subsets: Iterable[Sequence[int]] | None = None,
    kernels: Sequence[KernelSpec] = (KernelSpec("l1"),),
    kinds: Sequence[str] = INDEX_KINDS,
    config: EstimatorConfig = EstimatorConfig(),
    override=None,
    pi: Sequence[int] | None = None,
) -> AnalysisResult:
    """Estimate every requested (subset, kind, kernel) index, sharing model runs across kernels."""
    for kind in kinds:
        if kind not in INDEX_KINDS:
            raise ValueError(f"unknown index kind {kind!r}")
    eng = _Engine(model, ew, kernels, config, override, pi)
    subsets = [(j,) for j in range(model.d)] if subsets is None else [tuple(sorted(u)) for u in subsets]
    dens = eng.denominator()
    estimates = []
    for u in subsets:
        for kind in kinds:
            parts = eng.summands(kind, u)
            for k in eng.kernels:
                estimates.append(eng.finish(kind, u, k, parts[k.label]))
    return AnalysisResult(estimates, dens, eng.mu, eng.route, eng.base_dm.route, model.meter.counts())


def _single(kind, model, ew, subset, kernel, config, override=None):
    u = subset.u if isinstance(subset, SubsetSpec) else tuple(subset)
    pi = subset.pi if isinstance(subset, SubsetSpec) else None
    full_pi = None if pi is None else list(u) + list(pi)
    res = analyze(model, ew, [u], [kernel], [kind], config, override, full_pi)
    return res.estimates[0]


def estimate_first_order(model, ew, subset, kernel, config=EstimatorConfig(), override=None) -> IndexEstimate:
    return _single("first_order", model, ew, subset, kernel, config, override)


def estimate_total(model, ew, subset, kernel, config=EstimatorConfig(), override=None) -> IndexEstimate:
    return _single("total", model, ew, subset, kernel, config, override)


def estimate_upsilon(model, ew, subset, kernel, config=EstimatorConfig(), override=None) -> IndexEstimate:
    return _single("upsilon", model, ew, subset, kernel, config, override)


def functional_index(model, ew, subset, kernel, config=EstimatorConfig(), kind="first_order", override=None) -> IndexEstimate:
    """Index of a theta-indexed model: numerator and normaliser are integrated over the grid first."""
    if model.theta_grid is None:
        raise ValueError("functional_index needs a model with a theta grid")
    return _single(kind, model, ew, subset, kernel, config, override)


def estimate_denominator(model, ew, kernel, config=EstimatorConfig(), override=None) -> tuple[float, float]:
    """``mu_c^k`` and its standard error.  Raises when it is zero."""
    eng = _Engine(model, ew, [kernel], config, override)
    den = eng.denominator()[kernel.label]
    if not den.value > 0:
        raise ZeroDenominatorError(f"centred-output normaliser is {den.value!r} for kernel {kernel.label}")
    return den.value, den.std_error
