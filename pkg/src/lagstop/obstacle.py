"""Lagged payoff problems and the obstacle ``xi_k = sum_i phi_i((k - m_i)^+)``.

A payoff functional never sees the whole path: it is called as
``fn(k, prefix)`` where ``prefix`` holds ``values[:, :k+1]`` for a block of
paths, and it returns one number per row.  Lags are stored as times on the
problem and turned into integer step counts when the problem is bound to a
grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GridMismatch, InvalidArgument, PayoffEvaluationError
from .paths import PathBatch, TimeGrid

__all__ = [
    "PayoffFunctional",
    "ProblemSpec",
    "BoundProblem",
    "ObstacleValues",
    "ProbeResult",
    "PAYOFFS",
    "bind",
    "build_obstacle",
    "obstacle_matrix",
    "shiryaev_spec",
    "integrability_probe",
]

_GRID_RTOL = 1e-9


@dataclass(frozen=True)
class PayoffFunctional:
    label: str
    fn: Callable[[int, np.ndarray], np.ndarray] = field(repr=False, compare=False)

    def evaluate(self, k: int, prefix: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(k, prefix), dtype=float)
        if out.shape != (prefix.shape[0],):
            raise ValueError(
                f"payoff {self.label!r} returned shape {out.shape}, expected ({prefix.shape[0]},)"
            )
        return out


PAYOFFS: dict[str, PayoffFunctional] = {
    "brownian_identity": PayoffFunctional("brownian_identity", lambda k, x: x[:, k]),
    "running_max": PayoffFunctional("running_max", lambda k, x: x.max(axis=1)),
    "zero": PayoffFunctional("zero", lambda k, x: np.zeros(x.shape[0])),
}


def _payoff(name_or_fn) -> PayoffFunctional:
    if isinstance(name_or_fn, PayoffFunctional):
        return name_or_fn
    try:
        return PAYOFFS[name_or_fn]
    except KeyError:
        raise InvalidArgument(
            f"unknown payoff {name_or_fn!r}; built-ins are {sorted(PAYOFFS)}"
        ) from None


@dataclass(frozen=True)
class ProblemSpec:
    """``sup E[sum_i phi_i((tau - lag_i)^+)]`` over stopping times in ``[floor, T]``."""

    payoffs: tuple[tuple[PayoffFunctional, float], ...]
    floor: float
    horizon: float

    def __post_init__(self):
        if not self.payoffs:
            raise InvalidArgument("a problem needs at least one payoff")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise InvalidArgument(f"horizon must be positive, got {self.horizon!r}")
        pairs = tuple((_payoff(f), float(lag)) for f, lag in self.payoffs)
        object.__setattr__(self, "payoffs", pairs)
        for _, lag in pairs:
            if not 0.0 <= lag <= self.horizon:
                raise InvalidArgument(f"lag {lag!r} outside [0, {self.horizon}]")
        if not 0.0 <= self.floor <= self.horizon:
            raise InvalidArgument(f"floor {self.floor!r} outside [0, {self.horizon}]")

    def to_dict(self) -> dict:
        for f, _ in self.payoffs:
            if PAYOFFS.get(f.label) is not f:
                raise InvalidArgument(f"payoff {f.label!r} is not a built-in and cannot be serialized")
        return {
            "horizon": self.horizon,
            "floor": self.floor,
            "payoffs": [{"name": f.label, "lag": lag} for f, lag in self.payoffs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        try:
            payoffs = tuple((p["name"], float(p["lag"])) for p in d["payoffs"])
            return cls(payoffs, float(d["floor"]), float(d["horizon"]))
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed problem spec: {exc}") from exc


def shiryaev_spec(epsilon: float, horizon_T: float) -> ProblemSpec:
    """Stop a Brownian motion but collect its value ``epsilon`` earlier: ``B_{(tau - eps)^+}``."""
    if not 0.0 <= epsilon <= horizon_T:
        raise InvalidArgument(f"epsilon {epsilon!r} outside [0, {horizon_T!r}]")
    return ProblemSpec(((PAYOFFS["brownian_identity"], float(epsilon)),), 0.0, float(horizon_T))


@dataclass(frozen=True)
class BoundProblem:
    spec: ProblemSpec
    grid: TimeGrid
    lag_steps: tuple[int, ...]
    floor_index: int

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def min_lag(self) -> int:
        return min(self.lag_steps)

    @property
    def primary_lag(self) -> int:
        return self.lag_steps[0]


def _on_grid(value: float, dt: float, what: str) -> int:
    r = value / dt
    m = round(r)
    if abs(r - m) > _GRID_RTOL * max(1.0, abs(r)):
        raise GridMismatch(f"{what} {value!r} is not a multiple of dt={dt!r}")
    return int(m)


def bind(spec: ProblemSpec, grid: TimeGrid) -> BoundProblem:
    if not np.isclose(spec.horizon, grid.horizon, rtol=1e-12, atol=0.0):
        raise GridMismatch(f"problem horizon {spec.horizon!r} != grid horizon {grid.horizon!r}")
    lags = tuple(_on_grid(lag, grid.dt, "lag") for _, lag in spec.payoffs)
    floor_index = _on_grid(spec.floor, grid.dt, "floor")
    return BoundProblem(spec, grid, lags, floor_index)


@dataclass(frozen=True)
class ObstacleValues:
    grid: TimeGrid
    xi: np.ndarray = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.xi.shape[0]


def _evaluate_rows(i, payoff, j, prefix):
    try:
        out = payoff.evaluate(j, prefix)
    except Exception as exc:
        bad = None
        for p in range(prefix.shape[0]):
            try:
                payoff.evaluate(j, prefix[p : p + 1])
            except Exception:
                bad = p
                break
        raise PayoffEvaluationError(f"payoff {payoff.label!r} failed: {exc}", i, j, bad) from exc
    return out


def obstacle_matrix(bound: BoundProblem, values: np.ndarray) -> np.ndarray:
    """``xi`` for a raw level matrix ``[rows, n_steps + 1]``."""
    n = bound.n_steps
    if values.ndim != 2 or values.shape[1] != n + 1:
        raise InvalidArgument(f"values shape {values.shape} does not match {n} steps")
    xi = np.zeros(values.shape)
    for i, ((payoff, _), m) in enumerate(zip(bound.spec.payoffs, bound.lag_steps)):
        for j in range(max(n - m, 0) + 1):
            col = _evaluate_rows(i, payoff, j, values[:, : j + 1])
            # lagged index j is hit by k = j + m, and by every k <= m when j = 0
            if j == 0:
                xi[:, : min(m, n) + 1] += col[:, None]
            else:
                xi[:, j + m] += col
    return xi


def build_obstacle(bound: BoundProblem, batch: PathBatch) -> ObstacleValues:
    if not bound.grid.same_as(batch.grid):
        raise InvalidArgument("path batch grid does not match the bound problem grid")
    xi = obstacle_matrix(bound, batch.values)
    xi.setflags(write=False)
    return ObstacleValues(batch.grid, xi)


@dataclass(frozen=True)
class ProbeResult:
    estimate: float
    stderr: float
    n_paths: int
    subsample_estimates: tuple[float, ...]
    warning: str | None = None


def integrability_probe(obstacle: ObstacleValues) -> ProbeResult:
    """Sample estimate of ``E[max_k (xi_k^+)^2]`` with a heavy-tail warning.

    The estimate is recomputed on nested subsamples of doubling size; when it
    more than doubles from one subsample to the next the tail looks too heavy
    for the square-integrability assumption and a warning tag is attached.
    The probe is diagnostic only.
    """
    n = obstacle.n_paths
    if n < 2:
        raise InvalidArgument("integrability probe needs at least 2 paths")
    s = np.max(np.maximum(obstacle.xi, 0.0) ** 2, axis=1)
    est = float(s.mean())
    se = float(s.std(ddof=1) / np.sqrt(n))
    sizes = []
    size = n
    while size >= 2 and len(sizes) < 8:
        sizes.append(size)
        size //= 2
    subs = tuple(float(s[:m].mean()) for m in reversed(sizes))
    tag = None
    for a, b in zip(subs, subs[1:]):
        if a > 0 and b > 2.0 * a:
            tag = "superlinear growth of sup(xi+)^2 across doubling subsamples"
            warnings.warn(tag, RuntimeWarning, stacklevel=2)
            break
    return ProbeResult(est, se, n, subs, tag)
