"""Time grids, seeded Brownian / random-walk path batches and the walk tree.

Seeding
-------
Every path owns an independent Philox4x64-10 stream.  Path ``p`` of a batch
with seed ``s`` draws from ``Philox(key=s, counter=p << 192)`` (counter words ``(0, 0, 0, p)``), so the
stream depends only on ``(s, p)``.  Any subset of paths can be regenerated
on its own and chunked or threaded generation gives bit-identical output.
Brownian increments are ``sqrt(dt) * standard_normal`` draws from that
stream; walk increments are ``+/- step`` from ``integers(0, 2)`` draws.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import InvalidArgument, ResourceLimit

__all__ = [
    "TimeGrid",
    "PathBatch",
    "WalkTree",
    "make_grid",
    "simulate_brownian",
    "simulate_walk",
    "simulate_like",
    "enumerate_walk",
    "lagged_index",
    "write_paths_csv",
    "path_stream",
    "DEFAULT_WALK_CAP",
]

DEFAULT_WALK_CAP = 24
_ROWS_PER_TASK = 4096
_MAX_SEED = 2**64


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * dt`` on ``[0, T]``."""

    horizon: float
    n_steps: int
    times: np.ndarray = field(repr=False, compare=False)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def same_as(self, other: "TimeGrid") -> bool:
        return self.n_steps == other.n_steps and np.isclose(
            self.horizon, other.horizon, rtol=1e-12, atol=0.0
        )


def make_grid(horizon_T: float, n_steps: int) -> TimeGrid:
    if not np.isfinite(horizon_T) or horizon_T <= 0:
        raise InvalidArgument(f"horizon must be positive, got {horizon_T!r}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgument(f"n_steps must be a positive integer, got {n_steps!r}")
    n_steps = int(n_steps)
    times = np.linspace(0.0, float(horizon_T), n_steps + 1)
    times.setflags(write=False)
    return TimeGrid(float(horizon_T), n_steps, times)


@dataclass(frozen=True)
class PathBatch:
    """Path levels ``values[p, k]`` on ``grid``; row ``p`` is stream ``path_offset + p``."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    seed: int
    kind: str = "brownian"
    step_size: float | None = None
    path_offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)


def path_stream(seed: int, path_index: int) -> np.random.Generator:
    """The generator that drives path ``path_index`` of a batch seeded with ``seed``."""
    return np.random.Generator(
        np.random.Philox(key=seed, counter=int(path_index) << 192)
    )


def _check_batch_args(n_paths: int, seed: int, path_offset: int) -> None:
    if int(n_paths) != n_paths or n_paths < 1:
        raise InvalidArgument(f"n_paths must be a positive integer, got {n_paths!r}")
    if not 0 <= seed < _MAX_SEED:
        raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    if path_offset < 0 or path_offset + n_paths > _MAX_SEED:
        raise InvalidArgument(f"path range out of bounds: offset={path_offset}")


def _generate(n_paths, n_steps, seed, path_offset, draw, threads) -> np.ndarray:
    out = np.empty((n_paths, n_steps + 1))
    out[:, 0] = 0.0

    def fill(lo: int) -> None:
        hi = min(lo + _ROWS_PER_TASK, n_paths)
        for p in range(lo, hi):
            out[p, 1:] = draw(path_stream(seed, path_offset + p))
        np.cumsum(out[lo:hi, 1:], axis=1, out=out[lo:hi, 1:])

    starts = range(0, n_paths, _ROWS_PER_TASK)
    if threads > 1 and n_paths > _ROWS_PER_TASK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for lo in starts:
            fill(lo)
    return out


def simulate_brownian(
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    path_offset: int = 0,
    threads: int = 1,
) -> PathBatch:
    _check_batch_args(n_paths, seed, path_offset)
    sd = np.sqrt(grid.dt)
    n = grid.n_steps
    values = _generate(
        int(n_paths), n, seed, path_offset, lambda g: sd * g.standard_normal(n), threads
    )
    values.setflags(write=False)
    return PathBatch(grid, values, seed, "brownian", None, path_offset)


def simulate_walk(
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    step_size: float | None = None,
    *,
    path_offset: int = 0,
    threads: int = 1,
) -> PathBatch:
    """Symmetric +/- ``step_size`` walk; the default step is ``sqrt(dt)`` (Donsker scale)."""
    _check_batch_args(n_paths, seed, path_offset)
    step = float(np.sqrt(grid.dt)) if step_size is None else float(step_size)
    if not step > 0:
        raise InvalidArgument(f"step_size must be positive, got {step_size!r}")
    n = grid.n_steps
    values = _generate(
        int(n_paths),
        n,
        seed,
        path_offset,
        lambda g: np.where(g.integers(0, 2, n) == 1, step, -step),
        threads,
    )
    values.setflags(write=False)
    return PathBatch(grid, values, seed, "walk", step, path_offset)


def simulate_like(
    batch: PathBatch, n_paths: int, seed: int, *, path_offset: int = 0, threads: int = 1
) -> PathBatch:
    """A batch of the same kind and grid as ``batch`` with different streams."""
    if batch.kind == "walk":
        return simulate_walk(
            batch.grid, n_paths, seed, batch.step_size, path_offset=path_offset, threads=threads
        )
    return simulate_brownian(batch.grid, n_paths, seed, path_offset=path_offset, threads=threads)


def lagged_index(k, lag_steps):
    """``max(k - lag_steps, 0)``; works elementwise on arrays."""
    if np.isscalar(k) and np.isscalar(lag_steps):
        return max(int(k) - int(lag_steps), 0)
    return np.maximum(np.asarray(k) - np.asarray(lag_steps), 0)


@dataclass(frozen=True)
class WalkTree:
    """Implicit full binary tree of a symmetric walk.

    A node at depth ``k`` is an integer ``id`` in ``[0, 2**k)`` whose bits,
    most significant first, are the increments (1 = up).  The children of
    ``id`` are ``2*id`` (down) and ``2*id + 1`` (up); the ancestor at depth
    ``j`` is ``id >> (k - j)``.
    """

    n_steps: int
    step_size: float
    cap: int = DEFAULT_WALK_CAP

    def n_nodes(self, depth: int) -> int:
        return 1 << depth

    @property
    def node_count(self) -> int:
        return (1 << (self.n_steps + 1)) - 1

    def levels(self, depth: int, ids: np.ndarray | None = None) -> np.ndarray:
        if ids is None:
            ids = np.arange(1 << depth, dtype=np.uint64)
        ups = np.bitwise_count(np.asarray(ids, dtype=np.uint64)).astype(np.int64)
        return self.step_size * (2 * ups - depth)

    def prefixes(self, depth: int, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Path levels ``[rows, depth + 1]`` of depth-``depth`` nodes ``start..stop-1``."""
        if stop is None:
            stop = 1 << depth
        ids = np.arange(start, stop, dtype=np.uint64)
        out = np.empty((ids.size, depth + 1))
        for d in range(depth + 1):
            out[:, d] = self.levels(d, ids >> np.uint64(depth - d))
        return out

    def iter_prefix_chunks(self, depth: int, rows: int = 1 << 18) -> Iterator[tuple[int, np.ndarray]]:
        total = 1 << depth
        for lo in range(0, total, rows):
            yield lo, self.prefixes(depth, lo, min(lo + rows, total))


def enumerate_walk(n_steps: int, step_size: float, cap: int = DEFAULT_WALK_CAP) -> WalkTree:
    if int(n_steps) != n_steps or n_steps < 0:
        raise InvalidArgument(f"n_steps must be a non-negative integer, got {n_steps!r}")
    if n_steps > cap:
        raise ResourceLimit(f"walk depth {n_steps} exceeds the enumeration cap {cap}")
    if not step_size > 0:
        raise InvalidArgument(f"step_size must be positive, got {step_size!r}")
    return WalkTree(int(n_steps), float(step_size), cap)


def write_paths_csv(batch: PathBatch, path) -> None:
    """Dump a batch as ``path,k,t,value`` rows (row index includes ``path_offset``)."""
    times = batch.grid.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "k", "t", "value"])
        for p, row in enumerate(batch.values):
            pid = batch.path_offset + p
            for k, v in enumerate(row):
                w.writerow([pid, k, repr(float(times[k])), repr(float(v))])
