"""Symmetric positive semi-definite kernels on output vectors.

All families are products of a scalar feature of each argument, except the
quadratic kernel ``<y, y'>^2``.  They vanish when either argument is zero.

==========  ===============================  ======
kind        k(y, y')                         degree
==========  ===============================  ======
l1          |y|_1 |y'|_1                     2
lp          |y|_p^p |y'|_p^p                 2p
l2          |y|_2^2 |y'|_2^2                 4
quadratic   <y, y'>^2                        4
owen        |y|_2^(2p) |y'|_2^(2p)           4p
==========  ===============================  ======
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatchError

KINDS = ("l1", "lp", "l2", "quadratic", "owen")


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}; choose from {KINDS}")
        if self.kind in ("lp", "owen") and not self.p >= 1:
            raise ValueError("kernel exponent p must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """``l1``, ``l2``, ``quadratic``, ``lp:3``, ``owen:2``."""
        name, _, p = text.strip().lower().partition(":")
        if name in ("lp", "owen"):
            return cls(name, float(p) if p else 1.0)
        if p:
            raise ValueError(f"kernel {name!r} takes no exponent")
        return cls(name)

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.p:g}" if self.kind in ("lp", "owen") else self.kind

    @property
    def degree(self) -> float:
        return {"l1": 2.0, "lp": 2.0 * self.p, "l2": 4.0, "quadratic": 4.0, "owen": 4.0 * self.p}[self.kind]

    def feature(self, y: np.ndarray) -> np.ndarray:
        """Scalar feature phi with ``k(y, y') = phi(y) phi(y')`` (not for the quadratic kernel)."""
        y = np.asarray(y, dtype=float)
        if self.kind == "l1":
            return np.abs(y).sum(axis=-1)
        if self.kind == "lp":
            return (np.abs(y) ** self.p).sum(axis=-1)
        sq = (y * y).sum(axis=-1)
        if self.kind == "l2":
            return sq
        if self.kind == "owen":
            return sq**self.p
        raise ValueError("the quadratic kernel has no scalar feature")

    def pairwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """``k(a_i, b_i)`` along the last axis; leading axes broadcast."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape[-1] != b.shape[-1]:
            raise DimensionMismatchError(f"output dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
        if self.kind == "quadratic":
            return np.einsum("...i,...i->...", a, b) ** 2
        return self.feature(a) * self.feature(b)

    def norm(self, y: np.ndarray) -> np.ndarray:
        """The vector norm associated with the kernel (used to reduce elementary effects)."""
        y = np.asarray(y, dtype=float)
        if self.kind == "l1":
            return np.abs(y).sum(axis=-1)
        if self.kind == "lp":
            return (np.abs(y) ** self.p).sum(axis=-1) ** (1.0 / self.p)
        return np.sqrt((y * y).sum(axis=-1))

    def to_dict(self) -> dict:
        d = {"kernel": self.kind}
        if self.kind in ("lp", "owen"):
            d["p"] = self.p
        return d


def kernel_eval(k: KernelSpec, y, y2) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    y2 = np.atleast_1d(np.asarray(y2, dtype=float))
    if y.ndim != 1 or y.shape != y2.shape:
        raise DimensionMismatchError(f"kernel arguments must be vectors of equal length, got {y.shape} and {y2.shape}")
    return float(k.pairwise(y, y2))


def gram(k: KernelSpec, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return k.pairwise(pts[:, None, :], pts[None, :, :])


def gram_psd_check(k: KernelSpec, points) -> float:
    """Smallest eigenvalue of the Gram matrix of ``points`` (2 to 200 of them)."""
    pts = np.asarray(points, dtype=float)
    if not 2 <= len(pts) <= 200:
        raise ValueError("gram_psd_check needs between 2 and 200 points")
    return float(np.linalg.eigvalsh(gram(k, pts))[0])
