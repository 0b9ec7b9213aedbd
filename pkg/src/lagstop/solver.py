"""Regression Monte Carlo for the discrete reflected BSDE of a lagged stopping problem.

Backward recursion on a path batch, ``k = n-1, ..., 0``::

    C_k  = E[Y_{k+1} | F_k]            (least squares on the basis, see below)
    Y_k  = max(xi_k, C_k),  dK_k = (xi_k - C_k)^+      for k >= floor
    Y_k  = C_k,             dK_k = 0                   for k <  floor
    Y_n  = xi_n

so ``Y >= xi``, ``dK >= 0`` and ``dK * (Y - xi) = 0`` hold exactly.

Two facts about lagged obstacles sharpen the conditional expectation:

* obstacle values up to ``k + min_lag`` are already known at ``k``, so
  ``C_k >= L_k``, the best of them that is still admissible.  The
  regression therefore estimates the excess ``E[Y_{k+1} - L_k | F_k]`` and
  adds ``L_k`` back;
* once ``k + min_lag >= n`` every remaining obstacle value is known and
  ``C_k = L_k`` exactly; no regression is run.

The stopping rule stops at the first ``k >= floor`` with ``xi_k >= C_k``.
Where ``C_k`` is a regression estimate it additionally requires
``xi_k > L_k``: a value matched by a known later one is never worth taking
now, and the estimate may dip below ``L_k`` by noise.

Regressions are per time step, on centred and scaled monomials, with an
unpenalised intercept and ridge ``1e-8 * trace`` on the rest.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, InvalidArgument, NumericalFailure
from .features import BasisSpec, block_size, blocks_descending, state_block
from .obstacle import BoundProblem, ObstacleValues, bind, build_obstacle, obstacle_matrix
from .paths import PathBatch, TimeGrid, simulate_brownian, simulate_like, simulate_walk

__all__ = [
    "ValueEstimate",
    "StepFit",
    "RbsdeSolution",
    "solve",
    "evaluate_policy",
    "policy_run",
    "value_at_floor",
    "estimate_Z",
    "stopping_histogram",
    "solve_problem",
    "POLICY_PATH_OFFSET",
]

RIDGE = 1e-8
# policy-evaluation paths are streams 2**63 + i of the fitting seed: disjoint from any fit batch
POLICY_PATH_OFFSET = 2**63
_POLICY_CHUNK = 8192


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    stderr: float
    n_samples: int
    bias_note: str

    @classmethod
    def from_samples(cls, x: np.ndarray, bias_note: str) -> "ValueEstimate":
        x = np.asarray(x, dtype=float)
        if x.size < 2:
            raise InvalidArgument("a value estimate needs at least 2 samples")
        return cls(float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size)), int(x.size), bias_note)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_samples": self.n_samples, "bias_note": self.bias_note}


@dataclass
class StepFit:
    """Frozen conditional-expectation map at one index (``exact`` means ``C_k = L_k``).

    The fit is ``intercept + sum_j beta_j (x_j - center_j) / scale_j`` over the
    active (non-constant) design columns; ``weights`` and ``offset`` hold the
    same map folded into ``offset + x @ weights``.
    """

    exact: bool
    intercept: float = 0.0
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    active: np.ndarray | None = None
    beta: np.ndarray | None = None
    weights: np.ndarray | None = field(default=None, repr=False)
    offset: float = 0.0

    def __post_init__(self):
        if self.beta is not None and self.beta.size:
            self.weights = self.beta / self.scale
            self.offset = self.intercept - float(self.center @ self.weights)
        else:
            self.offset = self.intercept

    def predict_design(self, X: np.ndarray) -> np.ndarray:
        if self.weights is None:
            return np.full(X.shape[0], self.offset)
        Xa = X if self.active.all() else X[:, self.active]
        return Xa @ self.weights + self.offset

    def predict(self, basis: BasisSpec, base: np.ndarray) -> np.ndarray:
        return self.predict_design(basis.design(base))


def _fit(X: np.ndarray, target: np.ndarray, k: int) -> StepFit:
    """Ridge least squares of ``target`` on design ``X`` plus an unpenalised intercept."""
    ybar = float(target.mean())
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    active = scale > 0
    if not active.any():
        return StepFit(False, ybar, center[active], scale[active], active, np.zeros(0))
    Z = (X[:, active] - center[active]) / scale[active]
    G = Z.T @ Z
    lam = RIDGE * np.trace(G)
    try:
        beta = np.linalg.solve(G + lam * np.eye(G.shape[0]), Z.T @ (target - ybar))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"regression is singular at k={k}", k) from exc
    if not np.all(np.isfinite(beta)):
        raise NumericalFailure(f"regression produced non-finite coefficients at k={k}", k)
    return StepFit(False, ybar, center[active], scale[active], active, beta)


@dataclass
class RbsdeSolution:
    bound: BoundProblem
    basis: BasisSpec
    seed: int
    kind: str
    step_size: float | None
    fits: list[StepFit]
    rule: np.ndarray = field(repr=False)
    y_floor: np.ndarray = field(repr=False)
    y_mean: np.ndarray = field(repr=False)
    dy_mean: np.ndarray = field(repr=False)
    dy_stderr: np.ndarray = field(repr=False)
    k_mass_profile: np.ndarray = field(repr=False)
    reflection_gap_min: float
    complementarity_max: float
    dk_min: float
    terminal_max_abs: float
    value_insample: ValueEstimate
    Y: np.ndarray | None = field(default=None, repr=False)
    dK: np.ndarray | None = field(default=None, repr=False)
    value_policy: ValueEstimate | None = None
    policy_stops: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.rule.size

    @property
    def n_steps(self) -> int:
        return self.bound.n_steps

    def summary(self) -> dict:
        """The solution summary written by ``lagstop solve``."""
        spec = self.bound.spec
        vp = self.value_policy
        return {
            "value_insample": self.value_insample.mean,
            "stderr_insample": self.value_insample.stderr,
            "value_policy": None if vp is None else vp.mean,
            "stderr": None if vp is None else vp.stderr,
            "n_policy_paths": None if vp is None else vp.n_samples,
            "floor": spec.floor,
            "epsilon": spec.payoffs[0][1],
            "horizon": spec.horizon,
            "n_paths": self.n_paths,
            "n_steps": self.n_steps,
            "basis": self.basis.to_dict(),
            "seed": self.seed,
            "path_kind": self.kind,
            "K_mass_profile": self.k_mass_profile.tolist(),
            "stop_histogram": stopping_histogram(self, "policy" if vp is not None else "insample").tolist(),
            "structural": {
                "reflection_gap_min": self.reflection_gap_min,
                "complementarity_max": self.complementarity_max,
                "dK_min": self.dk_min,
                "terminal_max_abs": self.terminal_max_abs,
            },
        }


def _known(look: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(look), look, 0.0)


def _continuation(fit: StepFit, X, look):
    """Estimate of ``C_k``: the known bound ``L_k`` plus the regressed excess over it."""
    if fit.exact:
        return look.copy()
    return fit.predict_design(X) + _known(look)


def _stop_mask(fit: StepFit, cont, xi_k, look):
    if fit.exact:
        return xi_k >= cont
    return (xi_k >= cont) & (xi_k > look)


def solve(
    batch: PathBatch,
    obstacle: ObstacleValues,
    bound: BoundProblem,
    basis: BasisSpec | None = None,
    *,
    store: bool = True,
) -> RbsdeSolution:
    """Backward regression solve; see the module docstring for the scheme.

    With ``store=False`` only per-index summaries are kept (no ``Y``/``dK``
    matrices), which is what large runs need.
    """
    basis = basis or BasisSpec()
    grid = bound.grid
    if not grid.same_as(batch.grid) or not grid.same_as(obstacle.grid):
        raise InvalidArgument("batch, obstacle and problem grids differ")
    if obstacle.xi.shape != batch.values.shape:
        raise InvalidArgument("obstacle and batch shapes differ")
    xi = obstacle.xi
    if not np.all(np.isfinite(xi)):
        p, k = np.argwhere(~np.isfinite(xi))[0]
        raise DataError(f"obstacle contains NaN/Inf (first at path {p}, index {k})")
    values = batch.values
    N, n = values.shape[0], grid.n_steps
    f = bound.floor_index

    Y = np.empty((N, n + 1)) if store else None
    dK = np.zeros((N, n + 1)) if store else None
    y = xi[:, n].copy()
    terminal = float(np.abs(y - xi[:, n]).max())
    rule = np.full(N, n, dtype=np.int64)
    fits: list[StepFit] = [None] * n  # type: ignore[list-item]
    y_mean = np.empty(n + 1)
    dy_mean = np.zeros(n)
    dy_se = np.zeros(n)
    kmass = np.zeros(n + 1)
    y_mean[n] = y.mean()
    y_floor = y.copy() if f == n else None
    gap_min = 0.0
    comp_max = 0.0
    dk_min = 0.0
    if store:
        Y[:, n] = y

    for ks in blocks_descending(n, block_size(bound, basis, N)):
        block = state_block(bound, basis, values, xi, ks)
        for k in ks[::-1]:
            k = int(k)
            base, look = block.column(k)
            if k + bound.min_lag >= n:
                fit, X = StepFit(True), None
            else:
                X = basis.design(base)
                fit = _fit(X, y - _known(look), k)
            fits[k] = fit
            xk = xi[:, k]
            cont = _continuation(fit, X, look)
            if k >= f:
                y_new = np.maximum(xk, cont)
                dk = np.maximum(xk - cont, 0.0)
                rule[_stop_mask(fit, cont, xk, look)] = k
            else:
                y_new = cont
                dk = np.zeros(N)
            diff = y - y_new
            dy_mean[k] = diff.mean()
            dy_se[k] = diff.std(ddof=1) / np.sqrt(N) if N > 1 else 0.0
            if k >= f:
                gap = y_new - xk
                gap_min = min(gap_min, float(gap.min()))
                comp_max = max(comp_max, float(np.abs(dk * gap).max()))
            dk_min = min(dk_min, float(dk.min()))
            kmass[k] = dk.mean()
            y_mean[k] = y_new.mean()
            y = y_new
            if store:
                Y[:, k] = y
                dK[:, k] = dk
            if k == f:
                y_floor = y.copy()

    return RbsdeSolution(
        bound=bound,
        basis=basis,
        seed=batch.seed,
        kind=batch.kind,
        step_size=batch.step_size,
        fits=fits,
        rule=rule,
        y_floor=y_floor,
        y_mean=y_mean,
        dy_mean=dy_mean,
        dy_stderr=dy_se,
        k_mass_profile=kmass,
        reflection_gap_min=gap_min,
        complementarity_max=comp_max,
        dk_min=dk_min,
        terminal_max_abs=terminal,
        value_insample=_estimate(y_floor, "in-sample-high"),
        Y=Y,
        dK=dK,
    )


def _estimate(x: np.ndarray, note: str) -> ValueEstimate:
    if x.size < 2:
        return ValueEstimate(float(x.mean()), float("nan"), int(x.size), note)
    return ValueEstimate.from_samples(x, note)


Rule = Callable[[int, np.ndarray], np.ndarray]


def policy_run(rule, bound: BoundProblem, values: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply a rule forward to paths; returns ``(payoff, stop_index)`` per path.

    ``rule`` is a fitted :class:`RbsdeSolution` or a callable
    ``rule(k, values[:, :k+1]) -> stop mask``.
    """
    n, f = bound.n_steps, bound.floor_index
    N = values.shape[0]
    pay = xi[:, n].copy()
    stop_at = np.full(N, n, dtype=np.int64)
    alive = np.ones(N, dtype=bool)
    if isinstance(rule, RbsdeSolution):
        basis = rule.basis
        for ks in _blocks_ascending(n, f, block_size(bound, basis, N)):
            block = state_block(bound, basis, values, xi, ks)
            for k in ks:
                k = int(k)
                base, look = block.column(k)
                fit = rule.fits[k]
                cont = _continuation(fit, None if fit.exact else basis.design(base), look)
                stop = _stop_mask(rule.fits[k], cont, xi[:, k], look)
                hit = alive & stop
                pay[hit] = xi[hit, k]
                stop_at[hit] = k
                alive &= ~hit
    else:
        for k in range(f, n):
            hit = alive & np.asarray(rule(k, values[:, : k + 1]), dtype=bool)
            pay[hit] = xi[hit, k]
            stop_at[hit] = k
            alive &= ~hit
    return pay, stop_at


def _blocks_ascending(n: int, f: int, size: int):
    return [ks[ks >= f] for ks in reversed(list(blocks_descending(n, size))) if (ks >= f).any()]


def evaluate_policy(
    rule, batch: PathBatch, obstacle: ObstacleValues, bound: BoundProblem
) -> ValueEstimate:
    """Low-biased value of a frozen rule on an independent batch."""
    if not bound.grid.same_as(batch.grid) or not bound.grid.same_as(obstacle.grid):
        raise InvalidArgument("policy batch grid does not match the problem grid")
    if isinstance(rule, RbsdeSolution) and rule.seed == batch.seed and batch.path_offset < rule.n_paths:
        raise InvalidArgument("policy batch overlaps the fitting paths; use fresh streams")
    pay, _ = policy_run(rule, bound, batch.values, obstacle.xi)
    return ValueEstimate.from_samples(pay, "policy-low")


def _policy_chunks(sol: RbsdeSolution, n_paths: int, seed: int, offset: int, threads: int):
    bound = sol.bound
    template = PathBatch(bound.grid, np.zeros((1, bound.n_steps + 1)), seed, sol.kind, sol.step_size)

    def run(lo: int):
        rows = min(_POLICY_CHUNK, n_paths - lo)
        b = simulate_like(template, rows, seed, path_offset=offset + lo)
        return policy_run(sol, bound, b.values, obstacle_matrix(bound, b.values))

    starts = range(0, n_paths, _POLICY_CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    return np.concatenate([p for p, _ in parts]), np.concatenate([s for _, s in parts])


def attach_policy_value(
    sol: RbsdeSolution,
    n_paths: int,
    *,
    seed: int | None = None,
    path_offset: int = POLICY_PATH_OFFSET,
    threads: int = 1,
) -> RbsdeSolution:
    """Evaluate the fitted rule on fresh streams, in chunks, and store the result."""
    seed = sol.seed if seed is None else seed
    pay, stops = _policy_chunks(sol, n_paths, seed, path_offset, threads)
    sol.value_policy = ValueEstimate.from_samples(pay, "policy-low")
    sol.policy_stops = np.bincount(stops, minlength=sol.n_steps + 1)
    return sol


def value_at_floor(sol: RbsdeSolution) -> ValueEstimate:
    return sol.value_insample


def stopping_histogram(sol: RbsdeSolution, source: str = "insample") -> np.ndarray:
    """Empirical mass of the stopping index over ``0..n``."""
    if source == "policy":
        if sol.policy_stops is None:
            raise InvalidArgument("no policy evaluation attached to this solution")
        counts = sol.policy_stops
    elif source == "insample":
        counts = np.bincount(sol.rule, minlength=sol.n_steps + 1)
    else:
        raise InvalidArgument(f"unknown histogram source {source!r}")
    return counts / counts.sum()


def estimate_Z(sol: RbsdeSolution, batch: PathBatch) -> np.ndarray:
    """``Z_k ~ E[Y_{k+1} dW_k | F_k] / dt`` by regression on the solve basis.

    Needs a solve run with ``store=True`` on ``batch``.
    """
    if sol.Y is None:
        raise InvalidArgument("estimate_Z needs a solution computed with store=True")
    if batch.values.shape != sol.Y.shape:
        raise InvalidArgument("batch does not match the solution")
    bound, basis = sol.bound, sol.basis
    n = bound.n_steps
    dt = bound.grid.dt
    dW = batch.increments()
    xi_dummy = np.zeros_like(batch.values)
    Z = np.empty((batch.n_paths, n))
    for ks in blocks_descending(n, block_size(bound, basis, batch.n_paths)):
        block = state_block(bound, basis, batch.values, xi_dummy, ks)
        for k in ks:
            k = int(k)
            base, _ = block.column(k)
            target = sol.Y[:, k + 1] * dW[:, k]
            X = basis.design(base)
            Z[:, k] = _fit(X, target, k).predict_design(X) / dt
    return Z


def solve_problem(
    spec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    basis: BasisSpec | None = None,
    policy_paths: int | None = None,
    kind: str = "brownian",
    step_size: float | None = None,
    store: bool = False,
    threads: int = 1,
) -> RbsdeSolution:
    """Simulate, build the obstacle, solve, and evaluate the rule on fresh paths."""
    bound = bind(spec, grid)
    if kind == "brownian":
        batch = simulate_brownian(grid, n_paths, seed, threads=threads)
    elif kind == "walk":
        batch = simulate_walk(grid, n_paths, seed, step_size, threads=threads)
    else:
        raise InvalidArgument(f"unknown path kind {kind!r}")
    obstacle = build_obstacle(bound, batch)
    sol = solve(batch, obstacle, bound, basis, store=store)
    del batch, obstacle
    m = n_paths if policy_paths is None else policy_paths
    if m:
        attach_policy_value(sol, m, threads=threads)
    return sol
