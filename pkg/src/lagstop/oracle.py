"""Exact solution of lagged stopping problems on a symmetric random walk.

Because the payoff looks back at an earlier level, the walk level alone is
not a sufficient state, so the oracle works on the full history tree: every
node is a distinct path prefix.  With at most 24 steps that is 2**25 nodes,
which fits comfortably in memory as flat numpy arrays (one per depth).

Three independent routes to the optimum are provided:

* :func:`oracle_solve` -- backward induction ``V = max(xi, mean of children)``;
* :func:`evaluate_rule` -- exact expected payoff of any supplied adapted rule,
  by enumerating every leaf path;
* :func:`brute_force_rules` -- search over the rule space itself, either
  exhaustively (``n <= 4``) or as a linear program over stopping
  distributions whose optimal vertex is a deterministic rule (``n <= 12``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import InvalidArgument, NumericalFailure, ResourceLimit
from .obstacle import BoundProblem, bind, obstacle_matrix, shiryaev_spec
from .paths import WalkTree, enumerate_walk, make_grid

__all__ = [
    "OracleResult",
    "BruteForceResult",
    "oracle_solve",
    "evaluate_rule",
    "brute_force_rules",
    "oracle_value_curve",
    "always_stop_at_horizon",
    "window_max_rule",
    "strict_gap",
    "BRUTE_FORCE_MAX_STEPS",
]

Rule = Callable[[int, np.ndarray], np.ndarray]
BRUTE_FORCE_MAX_STEPS = 12
_EXHAUSTIVE_MAX_STEPS = 4


@dataclass
class OracleResult:
    value_at_floor: float
    value_profile: np.ndarray
    rule: list[np.ndarray] = field(repr=False)
    complexity: int
    floor_index: int
    node_values: list[np.ndarray] | None = field(default=None, repr=False)
    node_obstacle: list[np.ndarray] | None = field(default=None, repr=False)

    def as_rule(self) -> Rule:
        """The optimal rule as a callable on path prefixes (for :func:`evaluate_rule`)."""

        def decide(k: int, prefix: np.ndarray) -> np.ndarray:
            return self.rule[k][_node_ids(prefix)]

        return decide


def _node_ids(prefix: np.ndarray) -> np.ndarray:
    ups = (np.diff(prefix, axis=1) > 0).astype(np.int64)
    k = ups.shape[1]
    weights = 1 << np.arange(k - 1, -1, -1, dtype=np.int64)
    return ups @ weights if k else np.zeros(prefix.shape[0], dtype=np.int64)


def _check(tree: WalkTree, bound: BoundProblem) -> None:
    if tree.n_steps > tree.cap:
        raise ResourceLimit(f"walk depth {tree.n_steps} exceeds cap {tree.cap}")
    if bound.n_steps != tree.n_steps:
        raise InvalidArgument(
            f"problem is bound to {bound.n_steps} steps but the tree has {tree.n_steps}"
        )


def _payoff_at_depth(tree, payoff, i, depth):
    from .obstacle import _evaluate_rows

    out = np.empty(1 << depth)
    for lo, prefix in tree.iter_prefix_chunks(depth):
        out[lo : lo + prefix.shape[0]] = _evaluate_rows(i, payoff, depth, prefix)
    return out


def _obstacle_at_depth(tree, bound, k, root_cache) -> np.ndarray:
    ids = np.arange(1 << k, dtype=np.uint64)
    xi = np.zeros(1 << k)
    for i, ((payoff, _), m) in enumerate(zip(bound.spec.payoffs, bound.lag_steps)):
        j = max(k - m, 0)
        if j == 0:
            if i not in root_cache:
                root_cache[i] = _payoff_at_depth(tree, payoff, i, 0)[0]
            xi += root_cache[i]
        else:
            xi += _payoff_at_depth(tree, payoff, i, j)[ids >> np.uint64(k - j)]
    return xi


def oracle_solve(tree: WalkTree, bound: BoundProblem, *, keep_values: bool = False) -> OracleResult:
    """Exact Snell envelope on the history tree; ties resolve to "stop"."""
    _check(tree, bound)
    n, floor = tree.n_steps, bound.floor_index
    root_cache: dict[int, float] = {}
    xi = _obstacle_at_depth(tree, bound, n, root_cache)
    V = xi
    rule: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    rule[n] = np.ones(1 << n, dtype=bool)
    profile = np.empty(n + 1)
    profile[n] = V.mean()
    values = [None] * (n + 1) if keep_values else None
    obst = [None] * (n + 1) if keep_values else None
    if keep_values:
        values[n], obst[n] = V, xi
    for k in range(n - 1, -1, -1):
        cont = 0.5 * (V[0::2] + V[1::2])
        xi = _obstacle_at_depth(tree, bound, k, root_cache)
        if k >= floor:
            stop = xi >= cont
            V = np.where(stop, xi, cont)
        else:
            stop = np.zeros(1 << k, dtype=bool)
            V = cont
        rule[k] = stop
        profile[k] = V.mean()
        if keep_values:
            values[k], obst[k] = V, xi
    return OracleResult(
        value_at_floor=float(profile[floor]),
        value_profile=profile,
        rule=rule,
        complexity=tree.node_count,
        floor_index=floor,
        node_values=values,
        node_obstacle=obst,
    )


def evaluate_rule(tree: WalkTree, bound: BoundProblem, rule: Rule) -> float:
    """Exact expected obstacle at the stopping index chosen by ``rule``.

    ``rule(k, prefix)`` returns a boolean stop mask from the levels
    ``prefix = values[:, :k+1]``.  It is consulted at indices
    ``floor .. n-1``; index ``n`` always stops.
    """
    _check(tree, bound)
    n, floor = tree.n_steps, bound.floor_index
    total = 0.0
    for _, leaves in tree.iter_prefix_chunks(n):
        xi = obstacle_matrix(bound, leaves)
        pay = xi[:, n].copy()
        alive = np.ones(leaves.shape[0], dtype=bool)
        for k in range(floor, n):
            stop = alive & np.asarray(rule(k, leaves[:, : k + 1]), dtype=bool)
            pay[stop] = xi[stop, k]
            alive &= ~stop
        total += pay.sum()
    return float(total / (1 << n))


def always_stop_at_horizon(n_steps: int) -> Rule:
    return lambda k, prefix: np.full(prefix.shape[0], k >= n_steps)


def window_max_rule(lag_steps: int) -> Rule:
    """Wait until index ``m``, then collect the largest level seen on ``[0, m]``.

    At index ``m`` all of ``S_0..S_m`` are known and each ``S_j`` is paid by
    stopping at ``j + m``; the rule stops the first time the collectable
    level equals that maximum.  Its value is ``E max_{0<=j<=m} S_j`` whenever
    ``2m <= n``.
    """
    m = lag_steps

    def decide(k: int, prefix: np.ndarray) -> np.ndarray:
        if k < m:
            return np.zeros(prefix.shape[0], dtype=bool)
        return prefix[:, k - m] >= prefix[:, : m + 1].max(axis=1)

    return decide


@dataclass
class BruteForceResult:
    value: float
    method: str
    rules_considered: int | None
    lp_objective: float | None = None
    stop_table: np.ndarray | None = field(default=None, repr=False)


def _heap_obstacle(tree, bound) -> np.ndarray:
    root_cache: dict[int, float] = {}
    return np.concatenate(
        [_obstacle_at_depth(tree, bound, d, root_cache) for d in range(tree.n_steps + 1)]
    )


def _table_rule(table: np.ndarray) -> Rule:
    def decide(k: int, prefix: np.ndarray) -> np.ndarray:
        return table[(1 << k) - 1 + _node_ids(prefix)]

    return decide


def brute_force_rules(tree: WalkTree, bound: BoundProblem) -> BruteForceResult:
    """Optimal value found by searching stopping rules directly (no backward induction)."""
    _check(tree, bound)
    n, floor = tree.n_steps, bound.floor_index
    if n > BRUTE_FORCE_MAX_STEPS:
        raise ResourceLimit(f"brute force is limited to {BRUTE_FORCE_MAX_STEPS} steps, got {n}")
    xi = _heap_obstacle(tree, bound)
    if n <= _EXHAUSTIVE_MAX_STEPS:
        return _exhaustive(tree, bound, xi)
    return _linear_program(tree, bound, xi)


def _exhaustive(tree, bound, xi) -> BruteForceResult:
    n, floor = tree.n_steps, bound.floor_index
    free = np.arange((1 << floor) - 1, (1 << n) - 1)  # heap nodes at depths floor..n-1
    tables = np.array(list(product((False, True), repeat=free.size)), dtype=bool).reshape(
        -1, free.size
    )
    leaves = np.arange(1 << n)
    pay = np.broadcast_to(xi[(1 << n) - 1 + leaves], (tables.shape[0], leaves.size)).copy()
    col = {int(u): c for c, u in enumerate(free)}
    for d in range(n - 1, floor - 1, -1):
        heap = (1 << d) - 1 + (leaves >> (n - d))
        cols = np.array([col[int(u)] for u in heap])
        stop = tables[:, cols]
        pay = np.where(stop, xi[heap][None, :], pay)
    means = pay.mean(axis=1)
    best = int(np.argmax(means))
    table = np.zeros(xi.size, dtype=bool)
    table[free] = tables[best]
    table[(1 << n) - 1 :] = True
    return BruteForceResult(float(means[best]), "exhaustive", tables.shape[0], None, table)


def _linear_program(tree, bound, xi) -> BruteForceResult:
    n, floor = tree.n_steps, bound.floor_index
    N = xi.size
    depth = np.floor(np.log2(np.arange(N) + 1)).astype(int)
    # x = [stop mass s_u, continue mass c_u] for every heap node u
    c_obj = np.concatenate([-xi, np.zeros(N)])
    rows = np.arange(N)
    A = sparse.lil_matrix((N, 2 * N))
    A[rows, rows] = 1.0
    A[rows, N + rows] = 1.0
    child = rows[1:]
    A[child, N + (child - 1) // 2] = -0.5
    b = np.zeros(N)
    b[0] = 1.0
    bounds = [(0.0, 0.0) if depth[u] < floor else (0.0, None) for u in range(N)]
    bounds += [(0.0, 0.0) if depth[u] == n else (0.0, None) for u in range(N)]
    res = linprog(c_obj, A_eq=A.tocsr(), b_eq=b, bounds=bounds, method="highs-ds")
    if res.status != 0:
        raise NumericalFailure(f"rule-space linear program failed: {res.message}")
    s, c = res.x[:N], res.x[N:]
    table = s >= c
    table[depth < floor] = False
    value = evaluate_rule(tree, bound, _table_rule(table))
    if abs(value + res.fun) > 1e-7:
        raise NumericalFailure(
            f"extracted rule value {value} disagrees with LP optimum {-res.fun}"
        )
    return BruteForceResult(value, "lp", None, float(-res.fun), table)


def oracle_value_curve(
    n_steps: int, horizon_T: float, lags: list[int], *, cap: int | None = None
) -> list[tuple[float, int, float]]:
    """Exact walk values ``(epsilon, n_steps, value)`` of the lagged-Brownian problem.

    The walk step is ``sqrt(T / n)`` so the values approximate the Brownian
    problem as ``n`` grows.
    """
    grid = make_grid(horizon_T, n_steps)
    tree = enumerate_walk(n_steps, np.sqrt(grid.dt), **({} if cap is None else {"cap": cap}))
    rows = []
    for m in lags:
        if not 0 <= m <= n_steps:
            raise InvalidArgument(f"lag steps {m} outside [0, {n_steps}]")
        eps = m * grid.dt
        bound = bind(shiryaev_spec(eps, horizon_T), grid)
        rows.append((eps, n_steps, oracle_solve(tree, bound).value_at_floor))
    return rows


def strict_gap(n_steps: int, lag_steps: int, horizon_T: float = 1.0) -> dict:
    """Exact optimum versus the "wait until eps, then take the window max" policy.

    Both are computed on the unit-step walk, where every number is a dyadic
    rational and float64 arithmetic is exact, then scaled by ``sqrt(T/n)``.
    """
    if not 0 < 2 * lag_steps <= n_steps:
        raise InvalidArgument("strict gap needs 0 < 2 * lag_steps <= n_steps")
    grid = make_grid(horizon_T, n_steps)
    bound = bind(shiryaev_spec(lag_steps * grid.dt, horizon_T), grid)
    unit = enumerate_walk(n_steps, 1.0)
    optimum = float(oracle_solve(unit, bound).value_at_floor)
    sub = float(evaluate_rule(unit, bound, window_max_rule(lag_steps)))
    delta = float(np.sqrt(grid.dt))
    return {
        "n_steps": n_steps,
        "lag_steps": lag_steps,
        "delta": delta,
        "optimum_units": optimum,
        "subpolicy_units": sub,
        "margin_units": optimum - sub,
        "optimum": optimum * delta,
        "subpolicy": sub * delta,
        "margin": (optimum - sub) * delta,
    }
