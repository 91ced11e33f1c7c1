"""Models under study: built-in test functions and an external subprocess model.

Every model maps an ``(n, d)`` array of inputs to an ``(n, N)`` array of
outputs.  Models that depend on an extra index ``theta`` carry a
:class:`ThetaGrid`; ``evaluate_grid`` then returns ``(n, T, N)``.
"""

from __future__ import annotations

import hashlib
import json
import os
import queue
import subprocess
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    ModelEvaluationError,
    ModelExitError,
    ModelTimeoutError,
    ProtocolError,
)


class EvaluationMeter:
    """Thread-safe counter of model evaluations, split by run phase."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: dict[str, int] = defaultdict(int)
        self.current = "default"

    def add(self, n: int, phase: str | None = None):
        with self._lock:
            self._counts[phase or self.current] += int(n)

    @contextmanager
    def phase(self, name: str):
        previous, self.current = self.current, name
        try:
            yield self
        finally:
            self.current = previous

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self):
        with self._lock:
            self._counts.clear()


@dataclass(frozen=True)
class ThetaGrid:
    values: tuple
    weights: tuple

    def __post_init__(self):
        if len(self.values) == 0 or len(self.values) != len(self.weights):
            raise ValueError("theta grid needs matching, non-empty values and weights")
        if any(not (w > 0) for w in self.weights):
            raise ValueError("theta quadrature weights must be positive")
        if list(self.values) != sorted(self.values):
            raise ValueError("theta values must be sorted")

    @classmethod
    def trapezoid(cls, lo: float, hi: float, n: int) -> "ThetaGrid":
        vals = np.linspace(lo, hi, n)
        if n == 1:
            return cls((float(vals[0]),), (1.0,))
        w = np.full(n, (hi - lo) / (n - 1))
        w[[0, -1]] *= 0.5
        return cls(tuple(map(float, vals)), tuple(map(float, w)))

    def normalized_weights(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum()


class Model:
    """Base class.  Subclasses set ``d``, ``N`` and implement ``_eval``."""

    name = "model"
    d: int
    N: int
    theta_grid: ThetaGrid | None = None

    def __init__(self):
        self.meter = EvaluationMeter()

    def _eval(self, x: np.ndarray, theta) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, x, theta=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.d:
            raise DimensionMismatchError(f"{self.name} expects inputs of dimension {self.d}, got shape {x.shape}")
        if self.theta_grid is not None and theta is None:
            raise ValueError(f"{self.name} needs a theta value")
        y = np.asarray(self._eval(x2, theta), dtype=float).reshape(len(x2), self.N)
        self.meter.add(len(x2))
        if not np.isfinite(y).all():
            bad = ~np.all(np.isfinite(y), axis=1)
            raise ModelEvaluationError(f"{self.name} returned a non-finite output", x2[np.argmax(bad)])
        return y[0] if single else y

    __call__ = evaluate

    def evaluate_grid(self, x) -> np.ndarray:
        """Outputs for every theta in the grid, shape ``(n, T, N)`` (``T = 1`` without a grid)."""
        if self.theta_grid is None:
            return self.evaluate(x)[:, None, :]
        return np.stack([self.evaluate(x, t) for t in self.theta_grid.values], axis=1)

    def to_dict(self) -> dict:
        raise NotImplementedError


class Quadratic(Model):
    """Sum of squares of the inputs."""

    name = "quadratic"

    def __init__(self, d: int = 3):
        super().__init__()
        self.d, self.N = d, 1

    def _eval(self, x, theta):
        return np.einsum("ij,ij->i", x, x)

    def to_dict(self):
        return {"kind": "quadratic", "d": self.d}


GSOBOL_A = np.array(
    [
        [0, 0] + [6.52] * 8,
        [0, 1, 4.5, 9] + [99] * 6,
        list(range(1, 11)),
        [50] * 10,
    ],
    dtype=float,
)


def gsobol_a_digest() -> str:
    return hashlib.sha256(np.ascontiguousarray(GSOBOL_A).tobytes()).hexdigest()


class GSobol4(Model):
    """Four-output g-Sobol function on ``[0, 1]^10``."""

    name = "gsobol4"

    def __init__(self, A=None):
        super().__init__()
        self.A = GSOBOL_A if A is None else np.asarray(A, dtype=float)
        self.N, self.d = self.A.shape

    def _eval(self, x, theta):
        g = (np.abs(4.0 * x - 2.0)[:, None, :] + self.A[None]) / (1.0 + self.A[None])
        return np.prod(g, axis=2)

    def to_dict(self):
        return {"kind": "gsobol4"}


class GFunction(Model):
    """Single-output g-function ``prod (|4x_j - 2| + a_j) / (1 + a_j)``."""

    name = "gfunction"

    def __init__(self, a: Sequence[float]):
        super().__init__()
        self.a = np.asarray(a, dtype=float)
        self.d, self.N = len(self.a), 1

    def _eval(self, x, theta):
        return np.prod((np.abs(4.0 * x - 2.0) + self.a) / (1.0 + self.a), axis=1)

    def partial_variances(self) -> np.ndarray:
        return (1.0 / 3.0) / (1.0 + self.a) ** 2

    def variance(self) -> float:
        return float(np.prod(1.0 + self.partial_variances()) - 1.0)

    def sobol_first(self) -> np.ndarray:
        return self.partial_variances() / self.variance()

    def sobol_total(self) -> np.ndarray:
        v = self.partial_variances()
        prod_all = np.prod(1.0 + v)
        return v * (prod_all / (1.0 + v)) / self.variance()

    def to_dict(self):
        return {"kind": "gfunction", "a": self.a.tolist()}


class Linear(Model):
    name = "linear"

    def __init__(self, coefficients: Sequence[float], intercept: float = 0.0):
        super().__init__()
        self.coef = np.asarray(coefficients, dtype=float)
        self.intercept = float(intercept)
        self.d, self.N = len(self.coef), 1

    def _eval(self, x, theta):
        return x @ self.coef + self.intercept

    def to_dict(self):
        return {"kind": "linear", "coefficients": self.coef.tolist(), "intercept": self.intercept}


class ConstantModel(Model):
    name = "constant"

    def __init__(self, d: int, value: float | Sequence[float] = 0.0):
        super().__init__()
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.d, self.N = d, len(self.value)

    def _eval(self, x, theta):
        return np.broadcast_to(self.value, (len(x), self.N)).copy()

    def to_dict(self):
        return {"kind": "constant", "d": self.d, "value": self.value.tolist()}


class ThetaToy(Model):
    """``M(x, theta) = theta * x_1 + x_2`` over a theta grid."""

    name = "theta_toy"

    def __init__(self, grid: ThetaGrid | None = None):
        super().__init__()
        self.d, self.N = 2, 1
        self.theta_grid = grid if grid is not None else ThetaGrid((0.0, 0.5, 1.0), (1 / 6, 4 / 6, 1 / 6))

    def _eval(self, x, theta):
        return float(theta) * x[:, 0] + x[:, 1]

    def to_dict(self):
        g = self.theta_grid
        return {"kind": "theta_toy", "theta": list(g.values), "theta_weights": list(g.weights)}


class FunctionModel(Model):
    """Wrap a vectorised callable ``f(x[, theta]) -> (n, N)``."""

    def __init__(self, fn: Callable, d: int, N: int = 1, theta_grid: ThetaGrid | None = None, name: str = "function"):
        super().__init__()
        self.fn, self.d, self.N, self.theta_grid, self.name = fn, d, N, theta_grid, name

    def _eval(self, x, theta):
        return self.fn(x) if self.theta_grid is None else self.fn(x, theta)


# ---------------------------------------------------------------------------
# external models

HELLO = "kbsa-ndjson/1"
_EOF = object()


class ExternalModel(Model):
    """A model living in a subprocess that speaks newline-delimited JSON.

    Requests are ``{"id": k, "x": [...]}`` (plus ``"theta"`` for functional
    models), responses ``{"id": k, "y": [...]}``.  A connection opens with the
    handshake ``{"id": 0, "hello": "kbsa-ndjson/1"}`` which the subprocess must
    echo back.  Ids increase strictly and are never reused, even across
    restarts; a response whose id was already answered is ignored.
    At most one batch is in flight.  After a crash or timeout the process is
    restarted on the next call; ``retries`` allows that restart to happen within
    the same call, re-sending only the unanswered points.
    """

    name = "external"

    def __init__(
        self,
        command: Sequence[str],
        d: int,
        N: int,
        batch_size: int = 256,
        timeout: float = 30.0,
        retries: int = 0,
        theta_grid: ThetaGrid | None = None,
        env: dict | None = None,
    ):
        super().__init__()
        self.command = list(command)
        self.d, self.N = d, N
        self.batch_size = int(batch_size)
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.theta_grid = theta_grid
        self.env = env
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None
        self._next_id = 1
        self._lock = threading.Lock()

    # connection management

    def _start(self):
        env = dict(os.environ, **self.env) if self.env else None
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
            env=env,
        )
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()
        self._send([{"id": 0, "hello": HELLO}], 0)
        reply = self._read_line(0)
        if not isinstance(reply, dict) or reply.get("id") != 0 or reply.get("hello") != HELLO:
            self.close()
            raise ProtocolError(f"bad handshake reply {reply!r}", 0)

    @staticmethod
    def _pump(stream, lines):
        for line in stream:
            lines.put(line)
        lines.put(_EOF)

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def _send(self, records, first_id):
        try:
            self._proc.stdin.write("".join(json.dumps(r) + "\n" for r in records))
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            raise self._dead(first_id) from None

    def _dead(self, first_id):
        proc = self._proc
        try:
            code = proc.wait(timeout=self.timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            code = proc.wait()
        self._proc = None
        if code < 0:
            return ModelTimeoutError(f"model process killed by signal {-code} before answering", first_id)
        return ModelExitError(f"model process exited with status {code} before answering", first_id)

    def _read_line(self, waiting_id):
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self._proc.kill()
            self._proc.wait()
            self._proc = None
            raise ModelTimeoutError(f"no response within {self.timeout}s", waiting_id) from None
        if line is _EOF:
            raise self._dead(waiting_id)
        try:
            return json.loads(line)
        except json.JSONDecodeError:
            self.close()
            raise ProtocolError(f"malformed response line {line.strip()[:80]!r}", waiting_id) from None

    # evaluation

    def _batch(self, x, theta, results):
        ids = list(range(self._next_id, self._next_id + len(x)))
        self._next_id += len(x)
        pending = dict(zip(ids, range(len(x))))
        records = []
        for k, row in zip(ids, x):
            rec = {"id": k, "x": [float(v) for v in row]}
            if theta is not None:
                rec["theta"] = float(theta)
            records.append(rec)
        self._send(records, ids[0])
        while pending:
            first = min(pending)
            msg = self._read_line(first)
            if not isinstance(msg, dict) or not isinstance(msg.get("id"), int):
                self.close()
                raise ProtocolError(f"response without an integer id: {msg!r}", first)
            k = msg["id"]
            if k not in pending:
                if 0 < k < self._next_id:
                    continue  # duplicate of an answered request
                self.close()
                raise ProtocolError(f"response for unknown id {k}", first)
            y = msg.get("y")
            try:
                y = np.asarray(y, dtype=float).reshape(self.N)
            except (TypeError, ValueError):
                self.close()
                raise ProtocolError(f"response y has wrong shape, expected {self.N} numbers", k) from None
            results[pending.pop(k)] = y

    def _eval(self, x, theta):
        out: list = [None] * len(x)
        with self._lock:
            attempts = self.retries + 1
            while True:
                todo = [i for i, r in enumerate(out) if r is None]
                if not todo:
                    break
                try:
                    if self._proc is None:
                        self._start()
                    for s in range(0, len(todo), self.batch_size):
                        idx = todo[s : s + self.batch_size]
                        part: dict = {}
                        try:
                            self._batch(x[idx], theta, part)
                        finally:
                            for local, y in part.items():
                                out[idx[local]] = y
                except (ModelTimeoutError, ModelExitError):
                    attempts -= 1
                    if attempts <= 0:
                        raise
        return np.stack(out)

    def to_dict(self):
        return {"kind": "external", "command": self.command, "d": self.d, "N": self.N, "batch_size": self.batch_size}


# ---------------------------------------------------------------------------


def model_from_dict(spec: dict) -> Model:
    kind = spec.get("kind")
    if kind == "quadratic":
        return Quadratic(spec.get("d", 3))
    if kind == "gsobol4":
        return GSobol4(spec.get("A"))
    if kind == "gfunction":
        return GFunction(spec["a"])
    if kind == "linear":
        return Linear(spec["coefficients"], spec.get("intercept", 0.0))
    if kind == "constant":
        return ConstantModel(spec["d"], spec.get("value", 0.0))
    if kind == "theta_toy":
        grid = None
        if "theta" in spec:
            grid = ThetaGrid(tuple(spec["theta"]), tuple(spec.get("theta_weights", [1.0] * len(spec["theta"]))))
        return ThetaToy(grid)
    if kind == "external":
        grid = None
        if "theta" in spec:
            grid = ThetaGrid(tuple(spec["theta"]), tuple(spec.get("theta_weights", [1.0] * len(spec["theta"]))))
        return ExternalModel(
            spec["command"], spec["d"], spec["N"],
            batch_size=spec.get("batch_size", 256), timeout=spec.get("timeout", 30.0),
            retries=spec.get("retries", 0), theta_grid=grid,
        )
    raise ValueError(f"unknown model kind {kind!r}")



__all__ = [
    "EvaluationMeter", "ThetaGrid", "Model", "Quadratic", "GSobol4", "GSOBOL_A", "gsobol_a_digest",
    "GFunction", "Linear", "ConstantModel", "ThetaToy", "FunctionModel", "ExternalModel", "model_from_dict",
]
