"""Sequential packing engine.

Solids arrive at uniform random positions in a region, carried by a
space-time Poisson process (positions uniform, arrival times the ordering
key), and each is accepted iff it overlaps no previously accepted or frozen
solid.  Three input regimes are supported:

* explicit ordered point lists (``pack_sequence``),
* finite input of ceil(lam * tau) solids (``pack_finite_input``),
* infinite input run to saturation (``pack_to_saturation``), implemented
  event driven: proposals are generated only on the tracked vacant frontier
  with exponential time gaps at rate equal to the frontier measure, which
  reproduces the arrival law of the full process restricted to the points
  that can still matter.

All randomness flows through a caller-supplied numpy Generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from ._gridindex import UniformGridIndex, group_any
from .errors import ContractViolation, UnsupportedConfiguration, ValidationError
from .geometry import Box, ConvexSolid
from .vacancy import IntervalVacancy, VacancyTree

FloatArray = NDArray[np.float64]

ENGINE_VERSION = "jamlab-0.1.0"


class SpaceTimePoint(NamedTuple):
    position: FloatArray
    time: float
    index: int


@dataclass(eq=False)
class PointSet:
    """Arrival list ordered by (time, lexicographic position)."""

    positions: FloatArray
    times: FloatArray
    indices: NDArray[np.int64]

    @classmethod
    def from_arrays(cls, positions: FloatArray, times: FloatArray) -> "PointSet":
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        times = np.asarray(times, dtype=float)
        d = positions.shape[1]
        keys = tuple(positions[:, ax] for ax in reversed(range(d))) + (times,)
        order = np.lexsort(keys)
        return cls(positions[order], times[order], np.arange(len(times)))

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> SpaceTimePoint:
        return SpaceTimePoint(self.positions[i], float(self.times[i]), int(self.indices[i]))

    def check_sorted(self) -> None:
        t = self.times
        if np.any(np.diff(t) < 0):
            raise ContractViolation("points must be sorted by time")
        ties = np.flatnonzero(np.diff(t) == 0)
        for k in ties:
            a, b = self.positions[k], self.positions[k + 1]
            for ax in range(len(a)):
                if a[ax] < b[ax]:
                    break
                if a[ax] > b[ax]:
                    raise ContractViolation("equal-time points must be in lexicographic order")

    def restrict_time(self, t_max: float) -> "PointSet":
        keep = self.times <= t_max
        return PointSet(self.positions[keep], self.times[keep], self.indices[keep])


def poisson_spacetime(region: Box, time_horizon: float, intensity: float,
                      rng: np.random.Generator) -> PointSet:
    """Homogeneous space-time Poisson sample on region x [0, horizon]."""
    if time_horizon <= 0:
        raise ContractViolation("time_horizon must be positive")
    if intensity < 0:
        raise ContractViolation("intensity must be nonnegative")
    n = rng.poisson(intensity * region.volume * time_horizon)
    positions = region.sample(rng, n)
    times = rng.uniform(0.0, time_horizon, size=n)
    return PointSet.from_arrays(positions, times)


# ---------------------------------------------------------------------------
# packing state


class PackingState:
    """Accepted centers plus frozen obstacles, with grid-accelerated queries.

    The hard-core invariant is maintained by construction: a point is only
    accepted through the blocked test, so pairwise gauge distances among
    accepted and frozen centers stay >= 1.
    """

    def __init__(self, solid: ConvexSolid, region: Box, frozen=None):
        if region.dim != solid.dim:
            raise ContractViolation("region dimension does not match the solid")
        self.solid = solid
        self.region = region
        if frozen is None:
            frozen = np.empty((0, solid.dim))
        self.frozen = np.atleast_2d(np.asarray(frozen, dtype=float))
        if self.frozen.size == 0:
            self.frozen = self.frozen.reshape(0, solid.dim)
        if self.frozen.shape[1] != solid.dim:
            raise ContractViolation("frozen points must match the solid dimension")
        self.cell_side = 2.0 * solid.diameter  # diameter of the difference body
        cap = 1024
        self._pos = np.empty((cap, solid.dim))
        self._times = np.empty(cap)
        self.n = 0
        self._grid: dict[tuple, list[int]] = {}
        for k, p in enumerate(self.frozen):
            self._grid.setdefault(self._cell(p), []).append(k)
        self._index: UniformGridIndex | None = None
        self._index_n = -1

    # blocker table = frozen rows then accepted rows
    def blocker_positions(self) -> FloatArray:
        if len(self.frozen):
            return np.concatenate([self.frozen, self._pos[:self.n]])
        return self._pos[:self.n]

    @property
    def positions(self) -> FloatArray:
        return self._pos[:self.n]

    @property
    def times(self) -> FloatArray:
        return self._times[:self.n]

    def _cell(self, p) -> tuple:
        return tuple((np.floor(np.asarray(p) / self.cell_side)).astype(np.int64))

    def accept(self, p, t: float = 0.0) -> None:
        if self.n == len(self._times):
            new_cap = 2 * self.n
            self._pos = np.resize(self._pos, (new_cap, self.solid.dim))
            self._times = np.resize(self._times, new_cap)
        self._pos[self.n] = p
        self._times[self.n] = t
        self._grid.setdefault(self._cell(p), []).append(len(self.frozen) + self.n)
        self.n += 1

    def is_blocked(self, p) -> bool:
        """Adjacency of p to any accepted or frozen center, grid-local."""
        p = np.asarray(p, dtype=float)
        base = np.floor(p / self.cell_side).astype(np.int64)
        cand: list[int] = []
        for off in self._neighbor_offsets():
            ids = self._grid.get(tuple(base + off))
            if ids:
                cand.extend(ids)
        if not cand:
            return False
        blockers = self.blocker_positions()[np.asarray(cand)]
        return bool(self.solid.in_difference_body(p - blockers).any())

    _offsets_cache: dict[int, np.ndarray] = {}

    def _neighbor_offsets(self) -> np.ndarray:
        d = self.solid.dim
        if d not in PackingState._offsets_cache:
            PackingState._offsets_cache[d] = np.stack(
                np.meshgrid(*([np.array([-1, 0, 1])] * d), indexing="ij"), axis=-1
            ).reshape(-1, d)
        return PackingState._offsets_cache[d]

    _TAIL_MAX = 48

    def _batch_index(self) -> UniformGridIndex:
        """Index over a prefix of the blockers; a short tail stays brute-forced.

        The batch index uses a finer cell (one solid diameter) than the
        scalar acceptance grid, halving the candidate count per query.
        """
        total = len(self.frozen) + self.n
        if self._index is None or total - self._index_n > self._TAIL_MAX:
            self._index = UniformGridIndex(self.blocker_positions().copy(),
                                           self.solid.diameter)
            self._index_n = total
        return self._index

    def _tail_pairs(self, points: FloatArray, reach: float):
        """Brute-force candidate pairs against blockers newer than the index."""
        total = len(self.frozen) + self.n
        if total == self._index_n:
            return None
        tail = self.blocker_positions()[self._index_n:total]
        near = (np.abs(points[:, None, :] - tail[None, :, :]) <= reach).all(-1)
        owners, cols = np.nonzero(near)
        counts = near.sum(axis=1)
        return counts, cols + self._index_n

    def candidate_groups(self, points: FloatArray, reach: float):
        """Blocker candidates within per-axis distance ``reach`` of each point,
        as one or two (owner_counts, flat_indices) groups."""
        index = self._batch_index()
        window = max(1, int(math.ceil(reach / index.cell_side)))
        groups = [index.candidates(points, window=window)]
        tail = self._tail_pairs(points, max(reach, window * index.cell_side))
        if tail is not None:
            groups.append(tail)
        return groups

    def blocked_mask(self, points: FloatArray) -> NDArray[np.bool_]:
        """Vectorized adjacency test for a batch of points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        blockers = self.blocker_positions()
        out = np.zeros(len(points), dtype=bool)
        for counts, flat in self.candidate_groups(points, self.solid.diameter):
            if flat.size == 0:
                continue
            owner = np.repeat(np.arange(len(points)), counts)
            hits = self.solid.in_difference_body(points[owner] - blockers[flat])
            out |= group_any(hits, counts)
        return out

    def min_pairwise_gauge(self) -> float:
        """Minimum gauge distance over all blocker pairs (test diagnostic)."""
        pts = self.blocker_positions()
        if len(pts) < 2:
            return math.inf
        best = math.inf
        for i in range(len(pts) - 1):
            g = self.solid.gauge(pts[i + 1:] - pts[i])
            best = min(best, float(g.min()))
        return best


# ---------------------------------------------------------------------------
# packing rules


def pack_sequence(points: PointSet, state: PackingState) -> PackingState:
    """Apply the sequential acceptance rule to an ordered arrival list.

    Points with positions outside the state's region are rejected
    unconditionally.  Acceptance tests run against a grid prefilter for the
    already-fixed blockers plus an exact local check that covers points
    accepted earlier in the same chunk.
    """
    points.check_sorted()
    pos, times = points.positions, points.times
    if pos.shape[1] != state.solid.dim:
        raise ContractViolation("point dimension does not match the packing state")
    inside = state.region.contains(pos)
    chunk = 8192
    for c0 in range(0, len(pos), chunk):
        c1 = min(c0 + chunk, len(pos))
        live = np.flatnonzero(inside[c0:c1]) + c0
        if len(live) == 0:
            continue
        pre_blocked = state.blocked_mask(pos[live])
        for j in live[~pre_blocked]:
            p = pos[j]
            if not state.is_blocked(p):
                state.accept(p, float(times[j]))
    return state


def pack_sequence_naive(points: PointSet, state: PackingState) -> PackingState:
    """Reference O(n^2) packer: every candidate is compared against every
    previously fixed center, no spatial index.  Oracle for the fast path."""
    points.check_sorted()
    accepted: list[np.ndarray] = [f for f in state.frozen]
    n_frozen = len(accepted)
    out_pos, out_t = [], []
    for i in range(len(points)):
        p = points.positions[i]
        if not state.region.contains(p[None, :])[0]:
            continue
        if accepted and state.solid.in_difference_body(p - np.asarray(accepted)).any():
            continue
        accepted.append(p)
        out_pos.append(p)
        out_t.append(points.times[i])
    for p, t in zip(out_pos, out_t):
        state.accept(p, float(t))
    return state


def pack_finite_input(lam: float, tau: float, solid: ConvexSolid,
                      rng: np.random.Generator) -> PackingState:
    """Pack the first ceil(lam * tau) uniform arrivals on the side-lam^(1/d) cube."""
    if lam <= 0 or tau <= 0:
        raise ContractViolation("lam and tau must be positive")
    region = Box.cube(lam ** (1.0 / solid.dim), solid.dim)
    n = int(math.ceil(lam * tau))
    positions = region.sample(rng, n)
    points = PointSet(positions, np.arange(1.0, n + 1.0), np.arange(n))
    return pack_sequence(points, PackingState(solid, region))


# ---------------------------------------------------------------------------
# saturation


@dataclass(eq=False)
class SaturationResult:
    state: PackingState
    n_accepted: int
    virtual_time: float
    vacancy_bound: float          # upper bound on remaining vacant measure
    frontier_measure: float = 0.0
    probes: int = 0
    stat_terminated: bool = False
    guard_terminated: bool = False

    @property
    def missed_solids_bound(self) -> float:
        return self.vacancy_bound / self.state.solid.half_gauge_ball_volume


def pack_to_saturation(lam: float, solid: ConvexSolid, rng: np.random.Generator,
                       epsilon: float = 1e-6) -> SaturationResult:
    """Run infinite input until the region is saturated.

    epsilon is the relative vacancy tolerance; 0 is permitted only in
    dimension 1, where the vacant set is tracked exactly.
    """
    if lam <= 0:
        raise ContractViolation("lam must be positive")
    region = Box.cube(lam ** (1.0 / solid.dim), solid.dim)
    return saturate_region(region, solid, rng, epsilon)


def saturate_region(region: Box, solid: ConvexSolid, rng: np.random.Generator,
                    epsilon: float = 1e-6, frozen=None) -> SaturationResult:
    if epsilon < 0:
        raise ContractViolation("epsilon must be nonnegative")
    if epsilon == 0 and solid.dim >= 2:
        raise UnsupportedConfiguration("epsilon=0 is only supported in dimension 1")
    state = PackingState(solid, region, frozen=frozen)
    if solid.dim == 1:
        vt = _saturate_1d(state, rng)
        return SaturationResult(state, state.n, vt, vacancy_bound=0.0)
    return _saturate_nd(state, rng, epsilon)


def _saturate_1d(state: PackingState, rng: np.random.Generator) -> float:
    """Exact event-driven saturation in d=1 via independent gap fragmentation.

    Each vacant gap receives its first arrival after an exponential wait with
    rate equal to its length, independently of other gaps; the minimum of the
    race reproduces the sequential next-acceptance law, so gaps can be
    processed in vectorized waves while keeping exact arrival times.
    """
    bw = state.solid.diameter  # blocking halfwidth: D = [-d_S, d_S]
    iv = IntervalVacancy(float(state.region.lo[0]), float(state.region.hi[0]))
    for f in state.frozen[:, 0]:
        iv.subtract(f - bw, f + bw)
    starts, ends = iv.intervals()
    lo = np.asarray(starts, dtype=float)
    glen = np.asarray(ends, dtype=float) - lo
    keep = glen > 0
    lo, glen = lo[keep], glen[keep]
    birth = np.zeros(len(lo))
    xs: list[np.ndarray] = []
    ts: list[np.ndarray] = []
    while len(lo):
        fire = birth + rng.exponential(1.0, size=len(lo)) / glen
        u = rng.random(len(lo))
        x = lo + u * glen
        xs.append(x)
        ts.append(fire)
        left_len = x - bw - lo
        right_lo = x + bw
        right_len = lo + glen - right_lo
        new_lo = np.concatenate([lo[left_len > 0], right_lo[right_len > 0]])
        new_len = np.concatenate([left_len[left_len > 0], right_len[right_len > 0]])
        birth = np.concatenate([fire[left_len > 0], fire[right_len > 0]])
        lo, glen = new_lo, new_len
    if not xs:
        return 0.0
    x_all = np.concatenate(xs)
    t_all = np.concatenate(ts)
    order = np.argsort(t_all)
    for x, t in zip(x_all[order], t_all[order]):
        state.accept(np.array([x]), float(t))
    return float(t_all.max())


def _hits_any(solid: ConvexSolid, p: FloatArray, accepted: list[np.ndarray]) -> bool:
    return bool(solid.in_difference_body(p - np.asarray(accepted)).any())


def _saturate_nd(state: PackingState, rng: np.random.Generator, epsilon: float,
                 probe_guard: int = 1_000_000) -> SaturationResult:
    region = state.region
    vol = region.volume
    t = 0.0
    last_accept_t = 0.0
    probes = 0

    # phase 1: thin the Poisson stream on the whole region while acceptance
    # is still frequent (the frontier is the whole region, untracked).
    batch = int(np.clip(vol * 8, 512, 8192))
    max_batch = int(np.clip(vol * 64, 4096, 65536))
    switch_rate = 0.005
    while True:
        pos = region.sample(rng, batch)
        gaps = np.cumsum(rng.exponential(1.0 / vol, size=batch))
        pre = state.blocked_mask(pos)
        n_acc = 0
        for j in np.flatnonzero(~pre):
            p = pos[j]
            if not state.is_blocked(p):
                state.accept(p, t + gaps[j])
                last_accept_t = t + gaps[j]
                n_acc += 1
        t += gaps[-1]
        probes += batch
        rate = n_acc / batch
        if rate < switch_rate and batch >= max_batch:
            break
        if rate < 0.25:
            batch = min(batch * 2, max_batch)

    # phase 2: vacancy-tree endgame.  Each batch snapshots the frontier and
    # thins the next K arrivals on it: probe gaps are exponential at rate =
    # snapshot measure, probes are consumed sequentially, and later probes in
    # the batch stay valid after an acceptance (cells certified covered by it
    # could never host an accepted arrival).
    tree = VacancyTree(state, epsilon)
    eps_vol = epsilon * vol
    ln_conf = math.log(1e6)
    consecutive = 0
    pending: list[np.ndarray] = []
    blocked_since_subdiv = 0
    subdiv_trigger = 16384
    guard_rounds = 0
    stat_terminated = guard_terminated = False
    batch = 4096
    while True:
        fm = tree.frontier_measure
        if fm <= 0.0 or fm < eps_vol:
            break
        need = ln_conf * fm / eps_vol
        if consecutive >= need:
            stat_terminated = True
            break
        if consecutive >= probe_guard:
            guard_rounds += 1
            if guard_rounds > 1:
                guard_terminated = True
                break
            if pending:
                tree.subdivide(np.concatenate(pending))
                pending.clear()
                blocked_since_subdiv = 0
            consecutive = 0
            continue
        if blocked_since_subdiv >= subdiv_trigger and pending:
            # refine where probes keep landing blocked; cumulative trigger so
            # the frontier keeps shrinking even while acceptances trickle in
            tree.subdivide(np.concatenate(pending))
            pending.clear()
            blocked_since_subdiv = 0
            continue
        k = int(min(batch, max(1024, need - consecutive + 1), probe_guard - consecutive))
        pts, leaf_ids = tree.sample_batch(rng, k)
        if len(pts) == 0:
            break
        gaps = np.cumsum(rng.exponential(1.0 / fm, size=len(pts)))
        blocked = state.blocked_mask(pts)
        n_acc = 0
        batch_accepted: list[np.ndarray] = []
        for j in np.flatnonzero(~blocked):
            p = pts[j]
            if batch_accepted and _hits_any(state.solid, p, batch_accepted):
                continue
            t_acc = t + gaps[j]
            state.accept(p, t_acc)
            tree.on_accept(p)
            last_accept_t = t_acc
            batch_accepted.append(p)
            n_acc += 1
        t += gaps[-1]
        probes += len(pts)
        n_blocked = len(pts) - n_acc
        blocked_since_subdiv += n_blocked
        pending.append(leaf_ids[blocked])
        if n_acc:
            consecutive = 0
        else:
            consecutive += len(pts)
            batch = min(batch * 2, 65536)

    fm = tree.frontier_measure
    bound = fm if fm < eps_vol else (eps_vol if stat_terminated else fm)
    return SaturationResult(state, state.n, last_accept_t, vacancy_bound=bound,
                            frontier_measure=fm, probes=probes,
                            stat_terminated=stat_terminated,
                            guard_terminated=guard_terminated)


# ---------------------------------------------------------------------------
# conditioning on a pre-packed configuration


def validate_boundary(eta: FloatArray, region: Box, solid: ConvexSolid) -> FloatArray:
    """Check a pre-packed configuration: pairwise non-overlapping translates,
    all centers outside the region."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if eta.size == 0:
        return eta.reshape(0, solid.dim)
    if eta.shape[1] != solid.dim:
        raise ValidationError("pre-packed points must match the solid dimension")
    inside = region.contains(eta)
    if inside.any():
        k = int(np.flatnonzero(inside)[0])
        raise ValidationError(f"pre-packed point {k} at {eta[k]} lies inside the region")
    for i in range(len(eta) - 1):
        hit = solid.in_difference_body(eta[i + 1:] - eta[i])
        if hit.any():
            j = int(np.flatnonzero(hit)[0]) + i + 1
            raise ValidationError(
                f"pre-packed points {i} and {j} overlap (positions {eta[i]}, {eta[j]})")
    return eta


def pack_with_boundary(L: float, eta, solid: ConvexSolid, rng: np.random.Generator,
                       epsilon: float = 1e-6) -> int:
    """Saturation count of [0, L]^d given frozen obstacles eta outside it."""
    if L <= 0:
        raise ContractViolation("L must be positive")
    region = Box.cube(L, solid.dim)
    eta = validate_boundary(eta, region, solid)
    result = saturate_region(region, solid, rng, epsilon, frozen=eta)
    return result.n_accepted


# ---------------------------------------------------------------------------
# rejection-sampling oracle (d = 1)


def rejection_until_jam_1d(lam: float, solid: ConvexSolid,
                           rng: np.random.Generator) -> SaturationResult:
    """Literal infinite-input packing in d=1: uniform proposals on the region
    until the exactly tracked vacant set is empty.  Oracle for the
    event-driven saturation mode."""
    if solid.dim != 1:
        raise ContractViolation("rejection oracle is one-dimensional")
    region = Box.cube(lam, 1)
    state = PackingState(solid, region)
    bw = solid.diameter
    iv = IntervalVacancy(0.0, lam)
    t = 0.0
    last_t = 0.0
    batch = 256
    while iv.measure > 0:
        pos = rng.uniform(0.0, lam, size=batch)
        gaps = np.cumsum(rng.exponential(1.0 / lam, size=batch))
        starts, ends = iv.intervals()
        used = 0
        while used < batch:
            seg = np.searchsorted(starts, pos[used:], side="right") - 1
            vacant = (seg >= 0) & (pos[used:] < ends[np.clip(seg, 0, len(ends) - 1)])
            hit = np.flatnonzero(vacant)
            if len(hit) == 0:
                break
            j = used + int(hit[0])
            x = float(pos[j])
            state.accept(np.array([x]), t + gaps[j])
            last_t = t + gaps[j]
            iv.subtract(x - bw, x + bw)
            if iv.measure <= 0:
                break
            starts, ends = iv.intervals()
            used = j + 1
        t += gaps[-1]
    return SaturationResult(state, state.n, last_t, vacancy_bound=0.0)


# ---------------------------------------------------------------------------
# run records


@dataclass(eq=False)
class RunRecord:
    """Reproducibility unit: one replication and its outputs."""

    config: dict
    master_seed: int
    replication_index: int
    outputs: dict = field(default_factory=dict)
    engine_version: str = ENGINE_VERSION
