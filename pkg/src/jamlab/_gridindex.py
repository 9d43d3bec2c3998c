"""Vectorized uniform-grid candidate gathering.

Points are bucketed on a regular grid; neighbor candidates for a batch of
query points come back as flat (owner, candidate) index pairs with contiguous
owner groups, so pairwise tests and per-owner reductions stay in numpy.  A
dense cell -> range table makes lookups pure integer indexing when the grid
is small enough, with a sorted-search fallback for sparse occupancy.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray


def expand_ranges(starts: NDArray[np.int64], ends: NDArray[np.int64]):
    """Concatenate integer ranges [starts_k, ends_k); returns (flat, counts)."""
    counts = ends - starts
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), counts
    seg = np.repeat(np.arange(len(counts)), counts)
    base = np.concatenate(([0], np.cumsum(counts)[:-1]))
    offsets = np.arange(total) - np.repeat(base, counts)
    return starts[seg] + offsets, counts


def group_any(flags: NDArray[np.bool_], group_counts: NDArray[np.int64]) -> NDArray[np.bool_]:
    """Per-group logical OR over contiguous groups (empty groups give False)."""
    out = np.zeros(len(group_counts), dtype=bool)
    nz = group_counts > 0
    if flags.size:
        bounds = np.concatenate(([0], np.cumsum(group_counts)[:-1]))[nz]
        out[nz] = np.maximum.reduceat(flags.astype(np.int8), bounds) > 0
    return out


_OFFSET_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _offsets(dim: int, window: int) -> np.ndarray:
    key = (dim, window)
    if key not in _OFFSET_CACHE:
        rng = np.arange(-window, window + 1)
        _OFFSET_CACHE[key] = np.stack(np.meshgrid(*([rng] * dim), indexing="ij"),
                                      axis=-1).reshape(-1, dim)
    return _OFFSET_CACHE[key]


class UniformGridIndex:
    """Static snapshot index over a point set for windowed neighbor queries."""

    _DENSE_LIMIT = 4_000_000

    def __init__(self, positions: NDArray[np.float64], cell_side: float):
        self.positions = positions
        self.cell_side = float(cell_side)
        n, d = positions.shape
        self.dim = d
        if n == 0:
            self._cmin = np.zeros(d, dtype=np.int64)
            self._extent = np.ones(d, dtype=np.int64)
        else:
            coords = np.floor(positions / self.cell_side).astype(np.int64)
            self._cmin = coords.min(axis=0)
            rel = coords - self._cmin
            self._extent = rel.max(axis=0) + 1
        self._strides = np.ones(d, dtype=np.int64)
        for ax in range(d - 2, -1, -1):
            self._strides[ax] = self._strides[ax + 1] * self._extent[ax + 1]
        ncells = int(self._strides[0] * self._extent[0])
        self._dense = ncells <= max(self._DENSE_LIMIT, 8 * n)
        if n == 0:
            self._order = np.empty(0, dtype=np.int64)
            self._starts = np.zeros(ncells + 1, dtype=np.int64) if self._dense else None
            self._codes_sorted = np.empty(0, dtype=np.int64)
            return
        codes = rel @ self._strides
        self._order = np.argsort(codes, kind="stable")
        self._codes_sorted = codes[self._order]
        if self._dense:
            counts = np.bincount(codes, minlength=ncells)
            self._starts = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        else:
            self._starts = None

    def candidates(self, query: NDArray[np.float64], window: int = 1):
        """Flat neighbor candidates within +-window grid cells of each query.

        Returns (owner_counts, flat_candidate_indices); owners are contiguous
        and ordered by query index.
        """
        m = len(query)
        if len(self.positions) == 0 or m == 0:
            return np.zeros(m, dtype=np.int64), np.empty(0, dtype=np.int64)
        qrel = np.floor(query / self.cell_side).astype(np.int64) - self._cmin
        off = _offsets(self.dim, window)
        w = len(off)
        base_codes = qrel @ self._strides
        off_codes = off @ self._strides
        codes = (base_codes[:, None] + off_codes[None, :]).reshape(m * w)
        inside = np.ones((m, w), dtype=bool)
        for ax in range(self.dim):
            cells_ax = qrel[:, ax, None] + off[None, :, ax]
            inside &= (cells_ax >= 0) & (cells_ax < self._extent[ax])
        inside = inside.reshape(m * w)
        if self._dense:
            codes[~inside] = 0
            lo = self._starts[codes]
            hi = self._starts[codes + 1]
        else:
            lo = np.searchsorted(self._codes_sorted, codes, side="left")
            hi = np.searchsorted(self._codes_sorted, codes, side="right")
        hi[~inside] = 0
        lo[~inside] = 0
        flat, counts = expand_ranges(lo, hi)
        owner_counts = counts.reshape(m, w).sum(axis=1)
        return owner_counts, self._order[flat]
