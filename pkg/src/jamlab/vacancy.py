"""Tracking the uncovered (vacant) part of the packing region.

A point p is blocked iff it lies in x + D for some accepted or frozen center
x, where D is the difference body of the solid; the vacant set is the
complement of that union inside the region.  Dimension 1 uses an exact
interval list.  Higher dimensions use a dyadic decomposition of the region
into cells tagged COVERED / FREE / MIXED:

* COVERED is certified by a single translate via the corner convexity test,
  so it is exact and the frontier (FREE + MIXED cells) is always an upper
  bound on the true vacant measure;
* FREE cells are certifiably disjoint from every translate, a lower bound;
* MIXED cells subdivide until a side-length floor derived from the vacancy
  tolerance, and any region covered only by a union of several translates
  stays MIXED (rejection sampling against the exact blocked test keeps
  vacancy samples uniform regardless).
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right

import numpy as np

from ._gridindex import group_any
from .errors import ContractViolation
from .geometry import ConvexSolid

FREE = 0
MIXED = 1
COVERED = 2
_DEAD = -1


class _Saturated:
    def __repr__(self) -> str:  # pragma: no cover
        return "SATURATED"


SATURATED = _Saturated()


def is_blocked(p, state) -> bool:
    """Whether p is adjacent to some accepted or frozen center (grid-local)."""
    return state.is_blocked(p)


# ---------------------------------------------------------------------------
# exact interval vacancy (d = 1)


class IntervalVacancy:
    """Vacant subset of a 1-d region as a sorted list of disjoint intervals."""

    def __init__(self, lo: float, hi: float):
        if hi <= lo:
            raise ContractViolation("interval region must satisfy lo < hi")
        self._starts = [float(lo)]
        self._ends = [float(hi)]
        self._measure = float(hi - lo)
        self._cum = None

    @property
    def measure(self) -> float:
        return self._measure

    def intervals(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self._starts), np.asarray(self._ends)

    def subtract(self, a: float, b: float) -> None:
        """Remove the closed interval [a, b] from the vacant set."""
        if b < a:
            return
        starts, ends = self._starts, self._ends
        i = bisect_right(ends, a)   # first interval with end > a
        j = bisect_left(starts, b)  # intervals i..j-1 start before b
        if i >= j:
            return
        new_s, new_e = [], []
        removed = 0.0
        for k in range(i, j):
            s, e = starts[k], ends[k]
            removed += min(e, b) - max(s, a)
            if s < a:
                new_s.append(s)
                new_e.append(a)
            if e > b:
                new_s.append(b)
                new_e.append(e)
        self._starts[i:j] = new_s
        self._ends[i:j] = new_e
        self._measure -= removed
        self._cum = None

    def sample(self, rng: np.random.Generator):
        if not self._starts:
            return SATURATED
        if self._cum is None:
            lengths = np.asarray(self._ends) - np.asarray(self._starts)
            self._cum = np.cumsum(lengths)
        u = rng.random() * self._cum[-1]
        k = int(np.searchsorted(self._cum, u, side="right"))
        k = min(k, len(self._starts) - 1)
        prev = self._cum[k - 1] if k else 0.0
        return np.array([self._starts[k] + (u - prev)])

    @property
    def frontier_measure(self) -> float:
        return self._measure


# ---------------------------------------------------------------------------
# dyadic vacancy tree (d >= 2)


def _pair_flags(deltas: np.ndarray, halves: np.ndarray, solid: ConvexSolid):
    """Per (cell, blocker) pair: (cell fully inside x+D, cell intersects x+D)."""
    if solid.kind == "ball":
        rr = (2.0 * solid.radius) ** 2
        a = np.abs(deltas)
        dmax2 = ((a + halves[:, None]) ** 2).sum(-1)
        dmin2 = (np.maximum(a - halves[:, None], 0.0) ** 2).sum(-1)
        return dmax2 <= rr, dmin2 <= rr
    if solid.kind == "box":
        big = 2.0 * solid.half_extents
        a = np.abs(deltas)
        covered = (a + halves[:, None] <= big).all(-1)
        intersects = (a - halves[:, None] <= big).all(-1)
        return covered, intersects
    normals, offsets = solid.diff_normals, solid.diff_offsets
    proj = deltas @ normals.T
    spread = halves[:, None] * np.abs(normals).sum(axis=1)[None, :]
    covered = (proj + spread <= offsets).all(-1)
    sep_edges = (proj - spread > offsets).any(-1)
    bb = solid.diff_bounding_halfwidths()
    sep_axes = (np.abs(deltas) - halves[:, None] > bb).any(-1)
    return covered, ~(sep_edges | sep_axes)


def classify_cells(state, centers: np.ndarray, halves: np.ndarray,
                   chunk: int = 65536) -> np.ndarray:
    """Status (FREE/MIXED/COVERED) of cube cells against all blockers of a state."""
    m = len(centers)
    if m == 0:
        return np.empty(0, dtype=np.int8)
    halves = np.broadcast_to(np.asarray(halves, dtype=float), (m,))
    out = np.empty(m, dtype=np.int8)
    for c0 in range(0, m, chunk):
        c1 = min(c0 + chunk, m)
        out[c0:c1] = _classify_chunk(state, centers[c0:c1], halves[c0:c1])
    return out


def _classify_chunk(state, centers: np.ndarray, halves: np.ndarray) -> np.ndarray:
    m = len(centers)
    reach = float(halves.max()) + float(state.solid.diff_bounding_halfwidths().max())
    blockers = state.blocker_positions()
    covered = np.zeros(m, dtype=bool)
    intersects = np.zeros(m, dtype=bool)
    for counts, flat in state.candidate_groups(centers, reach):
        if flat.size == 0:
            continue
        owner = np.repeat(np.arange(m), counts)
        covered_p, inter_p = _pair_flags(blockers[flat] - centers[owner],
                                         halves[owner], state.solid)
        covered |= group_any(covered_p, counts)
        intersects |= group_any(inter_p, counts)
    out = np.zeros(m, dtype=np.int8)
    out[intersects] = MIXED
    out[covered] = COVERED
    return out


def _classify_vs_point(centers, halves, x, solid):
    deltas = centers - x[None, :]
    return _pair_flags(deltas, halves, solid)


class VacancyTree:
    """Frontier of a dyadic decomposition of a cubic region.

    Only FREE and MIXED leaves are materialized; certified-covered mass is
    accumulated as a scalar.  The structure tracks the PackingState it was
    built from and must see every acceptance through :meth:`on_accept`.
    """

    def __init__(self, state, epsilon: float, bootstrap: bool = True,
                 stop_half: float | None = None):
        region = state.region
        sides = region.sides
        if not np.allclose(sides, sides[0], rtol=1e-9):
            raise ContractViolation("vacancy tree requires a cubic region")
        if epsilon <= 0:
            raise ContractViolation("vacancy tree requires epsilon > 0")
        self.state = state
        self.solid: ConvexSolid = state.solid
        self.dim = region.dim
        self.side = float(sides[0])
        self.epsilon = float(epsilon)
        min_cell = self.side * epsilon ** (1.0 / self.dim) / 2.0
        self.min_half = max(min_cell / 2.0, self.side * 2.0 ** -44)
        self._floor_half = self.side * 2.0 ** -48
        cap = 1024
        self._centers = np.empty((cap, self.dim))
        self._half = np.empty(cap)
        self._status = np.full(cap, _DEAD, dtype=np.int8)
        self._n = 0
        self.covered_measure = 0.0
        self._free_measure = 0.0
        self._mixed_measure = 0.0
        self._alive_ids = None
        self._cum = None
        bb = self.solid.diff_bounding_halfwidths()
        self._qmax = float(bb.max())
        self._bucket_side = 2.0 * self.solid.diameter
        self._bucket_hcap = self._bucket_side / 2.0
        self._buckets: dict[tuple, list[int]] = {}
        self._big: list[int] = []
        # children of cell (c, h) are at c +- child_half per axis with child_half = h/2
        self._splits = np.stack(np.meshgrid(*([np.array([-1.0, 1.0])] * self.dim),
                                            indexing="ij"), axis=-1).reshape(-1, self.dim)
        if bootstrap:
            root_center = (region.lo + region.hi) / 2.0
            h0 = self.side / 2.0
            halt = stop_half if stop_half is not None else self.min_half
            self._bootstrap(root_center[None, :], np.array([h0]), max(halt, self.min_half))

    # -- storage ----------------------------------------------------------

    def _grow(self, need: int) -> None:
        cap = len(self._half)
        if self._n + need <= cap:
            return
        new_cap = max(cap * 2, self._n + need)
        self._centers = np.resize(self._centers, (new_cap, self.dim))
        self._half = np.resize(self._half, new_cap)
        status = np.full(new_cap, _DEAD, dtype=np.int8)
        status[:self._n] = self._status[:self._n]
        self._status = status

    def _cell_measure(self, halves) -> np.ndarray:
        return (2.0 * halves) ** self.dim

    def _append(self, centers: np.ndarray, halves: np.ndarray, statuses: np.ndarray) -> None:
        m = len(centers)
        if m == 0:
            return
        self._grow(m)
        s = self._n
        self._centers[s:s + m] = centers
        self._half[s:s + m] = halves
        self._status[s:s + m] = statuses
        self._n += m
        meas = self._cell_measure(halves)
        self._free_measure += float(meas[statuses == FREE].sum())
        self._mixed_measure += float(meas[statuses == MIXED].sum())
        bucket_codes = np.floor(centers / self._bucket_side).astype(np.int64)
        for k in range(m):
            idx = s + k
            if halves[k] > self._bucket_hcap:
                self._big.append(idx)
            else:
                self._buckets.setdefault(tuple(bucket_codes[k]), []).append(idx)
        self._alive_ids = None

    def _kill(self, ids: np.ndarray) -> None:
        if len(ids) == 0:
            return
        st = self._status[ids]
        meas = self._cell_measure(self._half[ids])
        self._free_measure -= float(meas[st == FREE].sum())
        self._mixed_measure -= float(meas[st == MIXED].sum())
        self._status[ids] = _DEAD
        self._alive_ids = None

    # -- classification / refinement --------------------------------------

    def _bootstrap(self, centers, halves, stop_half) -> None:
        while len(centers):
            status = classify_cells(self.state, centers, halves)
            meas = self._cell_measure(halves)
            self.covered_measure += float(meas[status == COVERED].sum())
            free = status == FREE
            self._append(centers[free], halves[free], np.full(int(free.sum()), FREE, np.int8))
            mixed = status == MIXED
            h = float(halves[0])
            if h / 2.0 < stop_half or h / 2.0 < self.min_half:
                self._append(centers[mixed], halves[mixed],
                             np.full(int(mixed.sum()), MIXED, np.int8))
                break
            parents = centers[mixed]
            child_h = h / 2.0
            centers = (parents[:, None, :] + child_h * self._splits[None, :, :]).reshape(-1, self.dim)
            halves = np.full(len(centers), child_h)

    def _split_cells(self, ids: np.ndarray, vs_point: np.ndarray | None = None,
                     depth_floor: float | None = None) -> None:
        """Replace cells by their classified children (one or more levels).

        ``vs_point``: when set, children of FREE parents are classified against
        that single new center only (they are disjoint from all older ones).
        """
        floor_half = self.min_half if depth_floor is None else depth_floor
        ids = ids[self._status[ids] != _DEAD]
        if len(ids) == 0:
            return
        parent_free = self._status[ids] == FREE
        centers = self._centers[ids]
        halves = self._half[ids]
        self._kill(ids)
        queue = [(centers, halves, parent_free)]
        while queue:
            centers, halves, from_free = queue.pop()
            child_h = halves / 2.0
            c = (centers[:, None, :] + child_h[:, None, None] * self._splits[None, :, :])
            k = 2 ** self.dim
            c = c.reshape(-1, self.dim)
            ch = np.repeat(child_h, k)
            cf = np.repeat(from_free, k)
            status = np.empty(len(c), dtype=np.int8)
            if vs_point is not None and cf.any():
                cov, inter = _classify_vs_point(c[cf], ch[cf], vs_point, self.solid)
                st = np.zeros(int(cf.sum()), dtype=np.int8)
                st[inter] = MIXED
                st[cov] = COVERED
                status[cf] = st
            rest = ~cf if vs_point is not None else np.ones(len(c), dtype=bool)
            if rest.any():
                status[rest] = classify_cells(self.state, c[rest], ch[rest])
            meas = self._cell_measure(ch)
            self.covered_measure += float(meas[status == COVERED].sum())
            free = status == FREE
            self._append(c[free], ch[free], np.full(int(free.sum()), FREE, np.int8))
            mixed = status == MIXED
            can_split = mixed & (ch / 2.0 >= floor_half)
            keep = mixed & ~can_split
            self._append(c[keep], ch[keep], np.full(int(keep.sum()), MIXED, np.int8))
            if can_split.any():
                queue.append((c[can_split], ch[can_split],
                              cf[can_split] if vs_point is not None else
                              np.zeros(int(can_split.sum()), dtype=bool)))

    def _candidate_ids(self, x: np.ndarray) -> np.ndarray:
        reach = self._bucket_hcap + self._qmax
        ring = int(reach / self._bucket_side) + 1
        base = np.floor(x / self._bucket_side).astype(np.int64)
        found: list[int] = list(self._big)
        if self.dim == 2:
            for dx in range(-ring, ring + 1):
                for dy in range(-ring, ring + 1):
                    ids = self._buckets.get((base[0] + dx, base[1] + dy))
                    if ids:
                        found.extend(ids)
        else:
            from itertools import product
            for off in product(range(-ring, ring + 1), repeat=self.dim):
                ids = self._buckets.get(tuple(base + np.asarray(off)))
                if ids:
                    found.extend(ids)
        if not found:
            return np.empty(0, dtype=np.int64)
        ids = np.asarray(found, dtype=np.int64)
        ids = ids[self._status[ids] != _DEAD]
        near = (np.abs(self._centers[ids] - x) <= self._half[ids, None] + self._qmax).all(-1)
        return ids[near]

    def on_accept(self, x: np.ndarray) -> None:
        """Reclassify the frontier after accepting a center at x."""
        x = np.asarray(x, dtype=float)
        ids = self._candidate_ids(x)
        if len(ids) == 0:
            return
        cov, inter = _classify_vs_point(self._centers[ids], self._half[ids], x, self.solid)
        covered_ids = ids[cov]
        if len(covered_ids):
            self.covered_measure += float(self._cell_measure(self._half[covered_ids]).sum())
            self._kill(covered_ids)
        touched = ids[inter & ~cov]
        if len(touched) == 0:
            return
        splittable = touched[self._half[touched] / 2.0 >= self.min_half]
        at_floor = touched[self._half[touched] / 2.0 < self.min_half]
        if len(at_floor):
            was_free = at_floor[self._status[at_floor] == FREE]
            if len(was_free):
                meas = float(self._cell_measure(self._half[was_free]).sum())
                self._free_measure -= meas
                self._mixed_measure += meas
                self._status[was_free] = MIXED
        if len(splittable):
            self._split_cells(splittable, vs_point=x)

    def subdivide(self, ids: np.ndarray) -> None:
        """Force one extra level on the given leaves, allowed below min_cell."""
        ids = np.unique(np.asarray(ids, dtype=np.int64))
        ids = ids[(self._status[ids] != _DEAD) & (self._half[ids] / 2.0 >= self._floor_half)]
        if len(ids):
            half = self._half[ids]
            self._split_cells(ids, depth_floor=float(half.min()) / 2.0)

    # -- sampling ----------------------------------------------------------

    @property
    def frontier_measure(self) -> float:
        return self._free_measure + self._mixed_measure

    @property
    def free_measure(self) -> float:
        return self._free_measure

    def _alive(self):
        if self._alive_ids is None:
            self._alive_ids = np.flatnonzero(self._status[:self._n] != _DEAD)
            self._cum = np.cumsum(self._cell_measure(self._half[self._alive_ids]))
        return self._alive_ids, self._cum

    def sample_batch(self, rng: np.random.Generator, k: int):
        """k points uniform on the frontier with the leaf id of each."""
        ids, cum = self._alive()
        if len(ids) == 0 or cum[-1] <= 0:
            return np.empty((0, self.dim)), np.empty(0, dtype=np.int64)
        picks = np.searchsorted(cum, rng.random(k) * cum[-1], side="right")
        picks = np.minimum(picks, len(ids) - 1)
        chosen = ids[picks]
        h = self._half[chosen]
        pts = self._centers[chosen] + rng.uniform(-1.0, 1.0, size=(k, self.dim)) * h[:, None]
        return pts, chosen

    def compact(self) -> None:
        """Drop dead rows; invalidates previously returned leaf ids."""
        alive = np.flatnonzero(self._status[:self._n] != _DEAD)
        self._centers[:len(alive)] = self._centers[alive]
        self._half[:len(alive)] = self._half[alive]
        self._status[:len(alive)] = self._status[alive]
        self._status[len(alive):self._n] = _DEAD
        self._n = len(alive)
        self._buckets.clear()
        self._big = []
        bucket_codes = np.floor(self._centers[:self._n] / self._bucket_side).astype(np.int64)
        for idx in range(self._n):
            if self._half[idx] > self._bucket_hcap:
                self._big.append(idx)
            else:
                self._buckets.setdefault(tuple(bucket_codes[idx]), []).append(idx)
        self._alive_ids = None


# ---------------------------------------------------------------------------
# operation wrappers


def update_on_accept(tree, x, solid: ConvexSolid):
    """Reclassify vacancy after accepting a center at x; returns the tracker."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if isinstance(tree, IntervalVacancy):
        half = solid.diameter  # difference body of an interval is [-d_S, d_S]
        tree.subtract(float(x[0]) - half, float(x[0]) + half)
        return tree
    if solid is not tree.solid:
        raise ContractViolation("solid does not match the tree's packing state")
    tree.on_accept(x)
    return tree


def sample_vacant(tree, state, rng: np.random.Generator, max_probes: int = 1_000_000):
    """A point uniform on the true vacant set, or SATURATED.

    Probes the frontier and rejects blocked points; after ``max_probes``
    consecutive blocked probes the probed leaves are subdivided once, and if
    a further round stays blocked the tracker is declared SATURATED.
    """
    if isinstance(tree, IntervalVacancy):
        return tree.sample(rng)
    region_vol = state.region.volume
    for round_ in range(2):
        probed: list[np.ndarray] = []
        blocked_run = 0
        while blocked_run < max_probes:
            if tree.frontier_measure < tree.epsilon * region_vol:
                return SATURATED
            k = min(4096, max_probes - blocked_run)
            pts, ids = tree.sample_batch(rng, k)
            if len(pts) == 0:
                return SATURATED
            blocked = state.blocked_mask(pts)
            hit = np.flatnonzero(~blocked)
            if len(hit):
                return pts[hit[0]]
            blocked_run += k
            probed.append(ids)
        if round_ == 0:
            tree.subdivide(np.concatenate(probed))
    return SATURATED
