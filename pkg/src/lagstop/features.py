"""Regression features for the continuation value and the look-ahead bound.

For a problem whose first payoff has lag ``m`` the state features at index
``k`` are

``level``         ``B_k``
``lagged_level``  ``B_{(k-m)^+}``
``window_max``    max of the levels that are observed *and* still collectable,
                  ``max B_j`` over ``j in [(k-m)^+, min(k, n-m)]``
``time_to_go``    ``T - t_k`` (constant across paths; only useful in pooled fits)

All of them read ``values[:, :k+1]`` only.

The look-ahead bound ``L_k`` is the largest obstacle value that is already
known at ``k`` and can still be collected later: obstacle values
``xi_j`` with ``j <= k + min_lag`` depend on levels up to ``k`` only, so
``L_k = max xi_j`` over ``j in [max(k+1, floor), min(n, k + min_lag)]``
(``-inf`` when that range is empty).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .errors import InvalidArgument
from .obstacle import BoundProblem

__all__ = ["BasisSpec", "FEATURES", "range_max", "StateBlock", "state_block"]

FEATURES = ("level", "lagged_level", "window_max", "time_to_go")
_GROUP = 64
_TEMP_CELLS = 1 << 23  # float64 cells per scratch array in range_max (64 MiB)
_BLOCK_BYTES = 512 << 20  # feature storage per index block


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial basis in a subset of :data:`FEATURES` (intercept implied)."""

    features: tuple[str, ...] = ("level", "lagged_level", "window_max")
    degree: int = 3
    cross_terms: bool = True

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        bad = [f for f in self.features if f not in FEATURES]
        if bad or not self.features:
            raise InvalidArgument(f"unknown or empty feature set {self.features!r}")
        if len(set(self.features)) != len(self.features):
            raise InvalidArgument("duplicate features")
        if int(self.degree) != self.degree or self.degree < 1:
            raise InvalidArgument(f"degree must be a positive integer, got {self.degree!r}")

    @property
    def monomials(self) -> list[tuple[int, ...]]:
        q = len(self.features)
        out = []
        for d in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(q), d):
                if self.cross_terms or len(set(combo)) == 1:
                    out.append(combo)
        return out

    @property
    def n_terms(self) -> int:
        """Number of regression columns including the intercept."""
        return 1 + len(self.monomials)

    def design(self, base: np.ndarray) -> np.ndarray:
        """Monomial columns (no intercept) from base features ``[rows, q]``.

        Columns are built in column-major storage and each monomial reuses
        its lower-degree prefix, so the cost is one multiply per column.
        """
        mons = self.monomials
        cols = np.asfortranarray(base).T  # each feature contiguous
        out = np.empty((base.shape[0], len(mons)), order="F")
        seen: dict[tuple[int, ...], int] = {}
        for t, combo in enumerate(mons):
            if len(combo) == 1:
                out[:, t] = cols[combo[0]]
            else:
                np.multiply(out[:, seen[combo[:-1]]], cols[combo[-1]], out=out[:, t])
            seen[combo] = t
        return out

    def to_dict(self) -> dict:
        return {"features": list(self.features), "degree": self.degree, "cross_terms": self.cross_terms}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(tuple(d["features"]), int(d["degree"]), bool(d["cross_terms"]))


def _groups(lo: np.ndarray, hi: np.ndarray, max_len: int | None = None):
    """Split windows (nondecreasing ends) into runs that share column ``hi[first]``."""
    i, n = 0, lo.size
    while i < n:
        j = i + 1
        while j < n and (max_len is None or j - i < max_len) and lo[j] <= hi[i]:
            j += 1
        yield i, j
        i = j


def range_max(mat: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """``out[:, i] = mat[:, lo[i]:hi[i]+1].max(axis=1)`` for nondecreasing ``lo``/``hi``.

    Windows are grouped so that every window in a group contains one common
    column ``c``; each window max is then the larger of a reverse running
    max ending at ``c`` and a forward running max starting at ``c``.  Work is
    proportional to the group span, memory to one row chunk.
    """
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    out = np.empty((mat.shape[0], lo.size))
    for a, b in _groups(lo, hi):
        c = hi[a]
        l0, h1 = lo[a], hi[b - 1]
        chunk = max(256, _TEMP_CELLS // (h1 - l0 + 2))
        for r0 in range(0, mat.shape[0], chunk):
            rows = slice(r0, r0 + chunk)
            left = np.maximum.accumulate(mat[rows, l0 : c + 1][:, ::-1], axis=1)[:, ::-1]
            right = np.maximum.accumulate(mat[rows, c : h1 + 1], axis=1)
            out[rows, a:b] = np.maximum(left[:, lo[a:b] - l0], right[:, hi[a:b] - c])
    return out


def window_bounds(bound: BoundProblem, ks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, m = bound.n_steps, bound.primary_lag
    return np.maximum(ks - m, 0), np.minimum(ks, n - m)


def lookahead_bounds(bound: BoundProblem, ks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = bound.n_steps
    return np.maximum(ks + 1, bound.floor_index), np.minimum(n, ks + bound.min_lag)


@dataclass
class StateBlock:
    """Features and look-ahead bounds for a contiguous run of indices ``ks``."""

    ks: np.ndarray
    base: np.ndarray  # [rows, len(ks), q]
    lookahead: np.ndarray  # [rows, len(ks)]

    def column(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        i = int(k - self.ks[0])
        return self.base[:, i, :], self.lookahead[:, i]


def state_block(
    bound: BoundProblem, basis: BasisSpec, values: np.ndarray, xi: np.ndarray, ks: np.ndarray
) -> StateBlock:
    ks = np.asarray(ks, dtype=np.int64)
    rows = values.shape[0]
    m = bound.primary_lag
    base = np.empty((rows, ks.size, len(basis.features)))
    for f, name in enumerate(basis.features):
        if name == "level":
            base[:, :, f] = values[:, ks]
        elif name == "lagged_level":
            base[:, :, f] = values[:, np.maximum(ks - m, 0)]
        elif name == "window_max":
            base[:, :, f] = range_max(values, *window_bounds(bound, ks))
        else:
            base[:, :, f] = bound.grid.horizon - bound.grid.times[ks]
    lo, hi = lookahead_bounds(bound, ks)
    look = np.full((rows, ks.size), -np.inf)
    ok = lo <= hi
    if ok.any():
        look[:, ok] = range_max(xi, lo[ok], hi[ok])
    return StateBlock(ks, base, look)


def block_size(bound: BoundProblem, basis: BasisSpec, rows: int) -> int:
    """Indices per feature block.

    Range maxima cost about (window length + block length) per block, so
    blocks grow with the lag to amortise the window; storage for the block
    is capped at about 512 MiB.
    """
    window = max(bound.primary_lag, bound.min_lag)
    cap = max(1, _BLOCK_BYTES // (8 * max(rows, 1) * (len(basis.features) + 1)))
    return int(max(1, min(max(_GROUP, window // 2), cap)))


def blocks_descending(n_steps: int, size: int = _GROUP):
    """Index runs covering ``n_steps-1 .. 0`` from the top, each in ascending order."""
    hi = n_steps
    while hi > 0:
        lo = max(hi - size, 0)
        yield np.arange(lo, hi)
        hi = lo
