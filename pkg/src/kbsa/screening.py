"""Screening: Morris trajectories, elementary effects and Upsilon-based ranking.

``Upsilon_j`` bounds the total index of ``X_j`` from above, so an input whose
bound falls below the threshold is unimportant for the total index too.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .depmodel import DependencyModel, SubsetSpec, sample_target
from .estimators import EstimatorConfig, _Engine, _se
from .kernels import KernelSpec
from .exceptions import ZeroDenominatorError
from .streams import Stream, as_stream


@dataclass(frozen=True)
class MorrisDesign:
    d: int
    R: int = 50
    p: int = 8
    delta: float | None = None

    def __post_init__(self):
        if self.p < 2 or self.p % 2:
            raise ValueError("the number of levels p must be even and >= 2")
        if self.R < 1 or self.d < 1:
            raise ValueError("R and d must be positive")

    @property
    def step(self) -> float:
        return self.p / (2.0 * (self.p - 1)) if self.delta is None else float(self.delta)


def morris_trajectories(design: MorrisDesign, stream=None) -> np.ndarray:
    """``(R, d + 1, d)`` one-at-a-time trajectories on the grid ``{0, 1/(p-1), ..., 1}``.

    Step ``s`` moves coordinate ``order[s]`` by ``+delta`` when that stays in
    [0, 1] and by ``-delta`` otherwise.
    """
    gen = as_stream(stream).generator()
    R, d, p = design.R, design.d, design.p
    delta = design.step
    k_delta = int(round(delta * (p - 1)))
    if not math.isclose(k_delta / (p - 1), delta):
        raise ValueError("delta must be a multiple of 1/(p-1)")
    out = np.empty((R, d + 1, d))
    for r in range(R):
        k = gen.integers(0, p, size=d)
        order = gen.permutation(d)
        out[r, 0] = k / (p - 1)
        for s, j in enumerate(order):
            k = k.copy()
            k[j] = k[j] + k_delta if k[j] + k_delta <= p - 1 else k[j] - k_delta
            out[r, s + 1] = k / (p - 1)
    return out


def step_coordinates(traj: np.ndarray) -> np.ndarray:
    """Index of the coordinate changed at each step, shape (R, d)."""
    diff = np.abs(np.diff(traj, axis=1)) > 0
    return np.argmax(diff, axis=2)


def _open_levels(U: np.ndarray, p: int) -> np.ndarray:
    """Grid levels mapped to cell midpoints ``(k + 1/2) / p``, strictly inside (0, 1)."""
    return (U * (p - 1) + 0.5) / p


@dataclass
class MuStar:
    value: float
    std_error: float
    mode: str


def elementary_effects(model, ew, design: MorrisDesign, traj: np.ndarray, kernel: KernelSpec = KernelSpec("l1"),
                       mode: str = "independent", inner_mc: int = 2000, override=None, stream=None) -> np.ndarray:
    """Absolute elementary effects ``|M(after) - M(before)|`` per (trajectory, input): shape (R, d).

    Vector (and theta-indexed) outputs are reduced with the kernel's norm.
    ``independent`` maps grid levels through the marginal quantiles of the
    weighted inputs when the weight factorizes (initial marginals otherwise);
    bounded marginals take the levels as they are, unbounded ones use cell
    midpoints.  ``dependent`` steps one coordinate on the uniform scale and
    re-derives all the others through the dependency model with
    ``pi = (j, rest)``.
    """
    R, d1, d = traj.shape
    coords = step_coordinates(traj)
    ee = np.empty((R, d))
    st = as_stream(stream)
    if mode == "independent":
        base = DependencyModel(ew, SubsetSpec.of((), d), inner_mc)
        if base.route == "factorized":
            def to_x(U):
                return np.stack([base.weighted_marginal(j).ppf(U[:, j]) for j in range(d)], axis=1)
        else:
            def to_x(U):
                return ew.space.quantile(U)
        U = traj.reshape(-1, d).copy()
        for j, dist in enumerate(ew.space.marginals):
            lo, hi = dist.support
            if not (math.isfinite(lo) and math.isfinite(hi)) or dist.unbounded:
                U[:, j] = _open_levels(U[:, j], design.p)
        y = model.evaluate_grid(to_x(U)).reshape(R, d1, -1)
        steps = kernel.norm(np.diff(y, axis=1))
        for r in range(R):
            ee[r, coords[r]] = steps[r]
        return ee
    if mode != "dependent":
        raise ValueError("mode must be 'independent' or 'dependent'")
    for j in range(d):
        dm = DependencyModel(ew, SubsetSpec.of((), d, [j] + [i for i in range(d) if i != j]), inner_mc, override=override)
        rows, s = np.nonzero(coords == j)
        before = _open_levels(traj[rows, s], design.p)
        after = _open_levels(traj[rows, s + 1], design.p)
        order = list(dm.subset.pi)
        U = np.concatenate([before[:, order], after[:, order]])
        x_pi = dm.transform(np.empty((len(U), 0)), U, st.child("dependent", j))
        y = model.evaluate_grid(dm.assemble(np.empty((len(U), 0)), x_pi))
        n = len(rows)
        ee[rows, j] = kernel.norm((y[n:] - y[:n]).reshape(n, -1))
    return ee


def mu_star(model, ew, design: MorrisDesign, j: int, mode: str = "independent", kernel: KernelSpec = KernelSpec("l1"),
            stream=None, override=None, inner_mc: int = 2000) -> MuStar:
    st = as_stream(stream)
    traj = morris_trajectories(design, st.child("design"))
    ee = elementary_effects(model, ew, design, traj, kernel, mode, inner_mc, override, st.child("ee"))
    col = ee[:, j]
    return MuStar(float(math.fsum(col) / len(col)), _se(col), mode)


@dataclass
class ScreeningReport:
    names: list
    upsilon: np.ndarray
    upsilon_se: np.ndarray
    mu_star: np.ndarray
    threshold: float
    kernel: str
    metadata: dict = field(default_factory=dict)

    @property
    def sqrt_upsilon(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.upsilon, 0.0))

    @property
    def ranks(self) -> np.ndarray:
        order = sorted(range(len(self.names)), key=lambda j: (-self.sqrt_upsilon[j], j))
        ranks = np.empty(len(order), dtype=int)
        ranks[order] = np.arange(1, len(order) + 1)
        return ranks

    @property
    def important(self) -> np.ndarray:
        return self.sqrt_upsilon >= self.threshold

    def important_set(self) -> set:
        return {n for n, keep in zip(self.names, self.important) if keep}

    def rows(self) -> list[dict]:
        return [
            {
                "input": n,
                "sqrt_upsilon": float(s),
                "mu_star": float(mu),
                "rank": int(r),
                "important": bool(imp),
            }
            for n, s, mu, r, imp in zip(self.names, self.sqrt_upsilon, self.mu_star, self.ranks, self.important)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["input", "sqrt_upsilon", "mu_star", "rank", "important"], lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({**row, "sqrt_upsilon": repr(row["sqrt_upsilon"]), "mu_star": repr(row["mu_star"]),
                        "important": str(row["important"]).lower()})
        return buf.getvalue()


def _upsilon_trajectories(eng: _Engine, m: int, stream: Stream) -> dict:
    """Per-input Upsilon summands from ``2m`` random one-at-a-time trajectories.

    Valid when the weighted inputs are independent: the coordinates other than
    ``j`` then do not depend on ``X_j``, and consecutive points of a trajectory
    are a pair ``(Y_j, rest), (Y'_j, rest)`` as required by ``M*``.
    """
    d = eng.d
    size = eng.cfg.chunk
    stars = []
    for c, s in enumerate(range(0, m, size)):
        n = min(size, m - s)
        st = stream.child("traj", c)
        start = sample_target(eng.base_dm, 2 * n, st.child("start"))
        repl = sample_target(eng.base_dm, 2 * n, st.child("replace"))
        pts = np.empty((2 * n, d + 1, d))
        pts[:, 0] = start
        for j in range(d):
            pts[:, j + 1] = pts[:, j]
            pts[:, j + 1, j] = repl[:, j]
        y = eng.model.evaluate_grid(pts.reshape(-1, d))
        y = y.reshape((2 * n, d + 1) + y.shape[1:])
        stars.append((y[:n, :-1] - y[:n, 1:], y[n:, :-1] - y[n:, 1:]))
    a = np.concatenate([p[0] for p in stars])
    b = np.concatenate([p[1] for p in stars])
    ones = np.ones(m)
    return {k.label: np.stack([eng.upsilon_summands(k, a[:, j], ones, b[:, j], ones) for j in range(d)])
            for k in eng.kernels}


def screen_rank(model, ew, kernel: KernelSpec, threshold: float, config: EstimatorConfig = EstimatorConfig(),
                design: MorrisDesign | None = None, mu_mode: str = "independent", override=None,
                names=None) -> ScreeningReport:
    """Rank inputs by ``sqrt(Upsilon_j)`` and flag those reaching ``threshold``."""
    d = model.d
    names = list(names or ew.space.names)
    eng = _Engine(model, ew, [kernel], config, override)
    den = eng.denominator()[kernel.label]
    scale = den.value * den.ew_mean**2
    independent = eng.route == "direct" and eng.base_dm.route == "factorized"
    ups = np.zeros(d)
    ses = np.zeros(d)
    with model.meter.phase("screening"):
        if independent:
            parts = _upsilon_trajectories(eng, config.outer("upsilon"), eng.root.child("screen"))[kernel.label]
        else:
            parts = np.stack([eng.summands("upsilon", (j,))[kernel.label] for j in range(d)])
    for j in range(d):
        s = parts[j]
        num = math.fsum(s) / len(s)
        if scale > 0:
            ups[j], ses[j] = num / scale, _se(s) / scale
        elif num != 0.0:
            raise ZeroDenominatorError("Upsilon normaliser is zero but the numerator is not")
    design = design or MorrisDesign(d)
    with model.meter.phase("morris"):
        traj = morris_trajectories(design, eng.root.child("morris"))
        ee = elementary_effects(model, ew, design, traj, kernel, mu_mode, config.inner_mc, override,
                                eng.root.child("morris-ee"))
    mu = ee.mean(axis=0)
    meta = {
        "upsilon_method": "trajectories" if independent else "per-input",
        "mu_star_mode": mu_mode,
        "mu_star_construction": "one-at-a-time steps through the dependency model" if mu_mode == "dependent" else "classical",
        "bound": "sqrt(Upsilon_j) < T implies sqrt(S_T_j) < T",
        "zero_denominator": not scale > 0,
    }
    return ScreeningReport(names, ups, ses, mu, float(threshold), kernel.label, meta)
