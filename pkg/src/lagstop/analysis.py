"""Reference values for the lagged-Brownian problem and solver studies built on them.

For ``v(eps) = sup_tau E B_{(tau - eps)^+}`` on ``[0, T]``:

* ``E max_{[0, s]} B = sqrt(2 s / pi)``;
* ``sqrt(2 (eps ^ (T - eps)) / pi) <= v(eps) <= sqrt(2 T / pi)``, with a
  strict lower bound for ``0 < eps < T/2``;
* for ``eps >= T/2`` the stopper knows every collectable level by time
  ``eps``, so ``v(eps) = sqrt(2 (T - eps) / pi)``.

Grid-monitored maxima fall short of the continuous ones by about
``0.5826 * sqrt(dt)``; :func:`grid_max_shortfall` gives that first-order
term and :func:`convergence_study` extrapolates it away.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, LagstopError
from .features import BasisSpec
from .obstacle import bind, shiryaev_spec
from .paths import make_grid
from .solver import solve_problem

__all__ = [
    "expected_max",
    "closed_form_value",
    "bounds",
    "Bounds",
    "grid_max_shortfall",
    "SolverConfig",
    "SweepRow",
    "SweepResult",
    "SweepAborted",
    "sweep",
    "row_seed",
    "convergence_study",
    "ConvergenceRow",
]

# -zeta(1/2) / sqrt(2 pi)
GRID_MAX_CONSTANT = 1.4603545088095868 / math.sqrt(2.0 * math.pi)


def expected_max(s: float) -> float:
    """``E max_{0<=t<=s} B_t``."""
    if not s >= 0:
        raise InvalidArgument(f"time span must be non-negative, got {s!r}")
    return math.sqrt(2.0 * s / math.pi)


def _check_eps(epsilon: float, horizon_T: float) -> None:
    if not horizon_T > 0:
        raise InvalidArgument(f"horizon must be positive, got {horizon_T!r}")
    if not 0.0 <= epsilon <= horizon_T:
        raise InvalidArgument(f"epsilon {epsilon!r} outside [0, {horizon_T!r}]")


def closed_form_value(epsilon: float, horizon_T: float) -> float | None:
    """``sqrt(2 (T - eps) / pi)`` when ``eps >= T/2``, else ``None``."""
    _check_eps(epsilon, horizon_T)
    if 2.0 * epsilon < horizon_T:
        return None
    return expected_max(horizon_T - epsilon)


@dataclass(frozen=True)
class Bounds:
    lower: float
    upper: float
    lower_is_strict: bool


def bounds(epsilon: float, horizon_T: float) -> Bounds:
    _check_eps(epsilon, horizon_T)
    lower = expected_max(min(epsilon, horizon_T - epsilon))
    return Bounds(lower, expected_max(horizon_T), 0.0 < epsilon < horizon_T / 2.0)


def grid_max_shortfall(dt: float, sigma: float = 1.0) -> float:
    """Leading-order gap ``E max_cont - E max_grid`` for a Brownian motion sampled every ``dt``."""
    return GRID_MAX_CONSTANT * sigma * math.sqrt(dt)


@dataclass(frozen=True)
class SolverConfig:
    n_steps: int = 500
    n_paths: int = 200_000
    policy_paths: int | None = None
    seed: int = 7
    basis: BasisSpec = field(default_factory=BasisSpec)
    threads: int = 1


def row_seed(base_seed: int, row: int) -> int:
    """Independent per-row seed derived from ``(base_seed, row)``."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(row,))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    value_policy: float
    value_insample: float
    stderr: float
    lower: float
    upper: float
    closed_form: float | None

    def sandwich_ok(self, tol_floor: float = 0.01, n_se: float = 3.0) -> bool:
        tol = n_se * self.stderr + tol_floor
        return self.lower - tol <= self.value_policy <= self.upper + tol


CSV_HEADER = ["epsilon", "value_policy", "stderr", "value_insample", "lower", "upper", "closed_form"]


@dataclass
class SweepResult:
    horizon: float
    config: SolverConfig
    rows: list[SweepRow]
    complete: bool = True
    error: str | None = None

    @property
    def max_adjacent_jump(self) -> float:
        v = [r.value_policy for r in self.rows]
        return max((abs(b - a) for a, b in zip(v, v[1:])), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            cf = "" if r.closed_form is None else repr(r.closed_form)
            w.writerow([repr(r.epsilon), repr(r.value_policy), repr(r.stderr), repr(r.value_insample),
                        repr(r.lower), repr(r.upper), cf])
        return buf.getvalue()

    def to_json(self) -> str:
        cfg = asdict(self.config)
        cfg.pop("threads")  # affects speed only
        return json.dumps(
            {
                "horizon": self.horizon,
                "config": cfg,
                "complete": self.complete,
                "error": self.error,
                "max_adjacent_jump": self.max_adjacent_jump,
                "all_sandwiched": all(r.sandwich_ok() for r in self.rows),
                "rows": [asdict(r) for r in self.rows],
            },
            indent=2,
            sort_keys=True,
        )


class SweepAborted(LagstopError):
    def __init__(self, message: str, partial: SweepResult):
        super().__init__(message)
        self.partial = partial


def sweep(horizon_T: float, epsilons, config: SolverConfig | None = None) -> SweepResult:
    """Solve the lagged-Brownian problem for each ``eps``; rows sorted by ``eps``."""
    config = config or SolverConfig()
    grid = make_grid(horizon_T, config.n_steps)
    eps_sorted = sorted(float(e) for e in epsilons)
    for e in eps_sorted:
        bind(shiryaev_spec(e, horizon_T), grid)
    result = SweepResult(horizon_T, config, [])
    for i, eps in enumerate(eps_sorted):
        try:
            sol = solve_problem(
                shiryaev_spec(eps, horizon_T),
                grid,
                config.n_paths,
                row_seed(config.seed, i),
                basis=config.basis,
                policy_paths=config.policy_paths,
                threads=config.threads,
            )
        except LagstopError as exc:
            result.complete = False
            result.error = f"row {i} (epsilon={eps!r}): {exc}"
            raise SweepAborted(result.error, result) from exc
        b = bounds(eps, horizon_T)
        result.rows.append(
            SweepRow(
                eps,
                sol.value_policy.mean,
                sol.value_insample.mean,
                sol.value_policy.stderr,
                b.lower,
                b.upper,
                closed_form_value(eps, horizon_T),
            )
        )
    return result


@dataclass(frozen=True)
class ConvergenceRow:
    n_steps: int
    n_paths: int
    value_policy: float
    stderr: float
    closed_form: float
    error: float
    extrapolated: float | None


def convergence_study(
    epsilon: float,
    horizon_T: float,
    sizes: list[tuple[int, int]],
    *,
    seed: int = 7,
    basis: BasisSpec | None = None,
) -> list[ConvergenceRow]:
    """Policy value against the closed form over grid / path sizes.

    ``extrapolated`` removes the ``sqrt(dt)`` grid bias from consecutive
    rows whose step counts differ by a factor of 4: ``2 v(4n) - v(n)``.
    """
    cf = closed_form_value(epsilon, horizon_T)
    if cf is None:
        raise InvalidArgument("convergence study needs epsilon >= T/2 (closed form branch)")
    rows: list[ConvergenceRow] = []
    for i, (n, N) in enumerate(sizes):
        sol = solve_problem(
            shiryaev_spec(epsilon, horizon_T),
            make_grid(horizon_T, n),
            N,
            row_seed(seed, i),
            basis=basis,
        )
        v = sol.value_policy
        ext = None
        if rows and n == 4 * rows[-1].n_steps:
            ext = 2.0 * v.mean - rows[-1].value_policy
        rows.append(ConvergenceRow(n, N, v.mean, v.stderr, cf, v.mean - cf, ext))
    return rows
