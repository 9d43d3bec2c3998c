"""Empirical spatial-localization diagnostics.

The packing seen in a unit window stops depending on far-away input once the
input is resampled outside a large enough ball; the smallest such radius is
estimated by rerandomization (a Monte Carlo lower bound on the adversarial
radius), and its tail fraction over replications is fit against an
exponential-decay model.  Causal clusters track the time-directed influence
set of a space-time point; local saturation times measure when a unit cube's
packing becomes immune to every subset of its moat points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from numpy.typing import NDArray

from .engine import PackingState, PointSet, pack_sequence, poisson_spacetime
from .errors import ContractViolation, DegenerateTail, HorizonTooSmall
from .geometry import Box, ConvexSolid
from .parallel import derive_seed, parallel_map
from .vacancy import IntervalVacancy, VacancyTree

FloatArray = NDArray[np.float64]


@dataclass(eq=False)
class StabilizationSample:
    center: tuple
    lam: float
    radius: float              # +inf when no grid radius cleared
    method: str                # "perturbation" | "causal_diameter"
    resamples: int


# ---------------------------------------------------------------------------
# perturbation estimator


def _window_signature(state: PackingState, center: FloatArray) -> bytes:
    """Accepted centers in the unit window at ``center``, dilated by the solid
    diameter, as a canonical byte string (bit-exact comparison)."""
    d_s = state.solid.diameter
    lo = center - d_s
    hi = center + 1.0 + d_s
    pos = state.positions
    if len(pos) == 0:
        return b""
    keep = ((pos >= lo) & (pos < hi)).all(-1)
    win = pos[keep]
    order = np.lexsort(tuple(win[:, ax] for ax in reversed(range(win.shape[1]))))
    return win[order].tobytes()


def _residual_vacancy(state: PackingState, epsilon: float) -> float:
    """Upper bound on the vacant measure left by a finite-horizon packing."""
    if state.solid.dim == 1:
        iv = IntervalVacancy(float(state.region.lo[0]), float(state.region.hi[0]))
        bw = state.solid.diameter
        for x in state.positions[:, 0]:
            iv.subtract(x - bw, x + bw)
        return iv.measure
    return VacancyTree(state, max(epsilon, 1e-9)).frontier_measure


def estimate_radius_perturbation(lam: float, center_index, L_grid, K: int, T_max: float,
                                 rng: np.random.Generator, solid: ConvexSolid,
                                 epsilon: float = 1e-3) -> StabilizationSample:
    """Smallest grid radius L such that resampling the input outside the ball
    of radius L (K independent times) never changes the window packing.

    The baseline must epsilon-saturate the region within T_max (checked), and
    the estimate is a Monte Carlo lower bound on the adversarial radius.
    """
    if K < 1:
        raise ContractViolation("need at least one resample per radius")
    grid = [float(L) for L in L_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractViolation("L grid must be strictly ascending")
    d = solid.dim
    region = Box.cube(lam ** (1.0 / d), d)
    center = np.asarray(center_index, dtype=float)
    base = poisson_spacetime(region, T_max, 1.0, rng)
    base_state = pack_sequence(base, PackingState(solid, region))
    residual = _residual_vacancy(base_state, epsilon)
    if residual > epsilon * region.volume:
        raise HorizonTooSmall(
            f"baseline vacancy {residual:.3g} exceeds {epsilon:.1g} * volume at T_max={T_max}; "
            "increase the horizon")
    signature = _window_signature(base_state, center)

    corners = np.stack(np.meshgrid(*zip(region.lo, region.hi), indexing="ij"),
                       axis=-1).reshape(-1, d)
    covering_L = float(np.sqrt(((corners - center) ** 2).sum(-1)).max())
    dist2 = ((base.positions - center) ** 2).sum(-1)
    for L in grid:
        if L >= covering_L:
            # nothing outside the ball to resample
            return StabilizationSample(tuple(np.atleast_1d(center_index)), lam, L,
                                       "perturbation", K)
        inside = dist2 <= L * L
        clean = True
        for _ in range(K):
            fresh = poisson_spacetime(region, T_max, 1.0, rng)
            far = ((fresh.positions - center) ** 2).sum(-1) > L * L
            merged = PointSet.from_arrays(
                np.concatenate([base.positions[inside], fresh.positions[far]]),
                np.concatenate([base.times[inside], fresh.times[far]]))
            repacked = pack_sequence(merged, PackingState(solid, region))
            if _window_signature(repacked, center) != signature:
                clean = False
                break
        if clean:
            return StabilizationSample(tuple(np.atleast_1d(center_index)), lam, L,
                                       "perturbation", K)
    return StabilizationSample(tuple(np.atleast_1d(center_index)), lam, math.inf,
                               "perturbation", K)


def _radius_sample_worker(lam, center_index, grid, K, T_max, solid, epsilon, seed):
    rng = np.random.default_rng(seed)
    return estimate_radius_perturbation(lam, center_index, grid, K, T_max, rng,
                                        solid, epsilon).radius


def sample_radii(lam: float, center_index, L_grid, K: int, T_max: float,
                 solid: ConvexSolid, n_samples: int, seed: int,
                 epsilon: float = 1e-3, threads: int | None = None) -> FloatArray:
    """Independent perturbation radius estimates (parallel over samples)."""
    args = [(lam, center_index, tuple(L_grid), K, T_max, solid, epsilon,
             derive_seed(seed, "stab", k)) for k in range(n_samples)]
    return np.asarray(parallel_map(_radius_sample_worker, args, threads))


def tail_table(radii, L_grid) -> list[tuple[float, float, int]]:
    """Empirical tail (L, fraction of radii exceeding L, sample count)."""
    r = np.asarray(radii, dtype=float)
    return [(float(L), float(np.mean(r > L)), len(r)) for L in L_grid]


# ---------------------------------------------------------------------------
# tail fit


@dataclass(eq=False)
class TailFit:
    slope: float
    intercept: float
    r_squared: float
    super_exponential: bool
    points_used: int


def fit_tail(table) -> TailFit:
    """Least-squares fit of log tail fraction against L over points in (0, 1).

    A negative slope with high r-squared is the exponential-decay diagnostic;
    significant concave curvature flags faster-than-exponential decay.
    """
    ls = np.asarray([row[0] for row in table], dtype=float)
    taus = np.asarray([row[1] for row in table], dtype=float)
    keep = (taus > 0.0) & (taus < 1.0)
    if keep.sum() < 3:
        raise DegenerateTail("need at least 3 tail points strictly inside (0, 1); widen the L grid")
    x, y = ls[keep], np.log(taus[keep])
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - fitted) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    super_exp = False
    if keep.sum() >= 4:
        qc, qb, qa = np.polyfit(x, y, 2)
        qfit = qc * x * x + qb * x + qa
        r2q = 1.0 - float(np.sum((y - qfit) ** 2)) / ss_tot if ss_tot > 0 else 1.0
        super_exp = qc < 0 and (r2q - r2) > 0.02
    return TailFit(float(slope), float(intercept), r2, super_exp, int(keep.sum()))


# ---------------------------------------------------------------------------
# causal clusters


def _cube_of(position: FloatArray) -> tuple:
    return tuple(int(v) for v in np.floor(position))


def _relevant(points: PointSet, t_star: float, cube_saturation) -> NDArray[np.bool_]:
    out = np.empty(len(points), dtype=bool)
    for k in range(len(points)):
        saturated = bool(cube_saturation.get(_cube_of(points.positions[k]), False))
        out[k] = (not saturated) or points.times[k] <= t_star
    return out


def causal_cluster(target_index: int, points: PointSet, t_star: float,
                   cube_saturation: dict, d_s: float):
    """Influence set of one point: all causally relevant points with a
    time-directed path to it, plus the covered cube neighborhoods.

    Edges run (y, s) -> (x, t) when |y - x| <= 2 d_S and s < t and both
    endpoints are relevant (a point in a saturated cube is relevant only up
    to the time threshold).  Returns (member indices, cube cluster set).
    """
    points.check_sorted()
    rel = _relevant(points, t_star, cube_saturation)
    pos, times = points.positions, points.times
    reach2 = (2.0 * d_s) ** 2
    members = {target_index}
    frontier = [target_index]
    while frontier:
        nxt: list[int] = []
        for idx in frontier:
            if not (rel[idx] or idx == target_index):
                continue
            d2 = ((pos - pos[idx]) ** 2).sum(-1)
            cand = np.flatnonzero((d2 <= reach2) & (times < times[idx]) & rel)
            for c in cand:
                if int(c) not in members:
                    members.add(int(c))
                    nxt.append(int(c))
        frontier = nxt
    cubes: set[tuple] = set()
    for idx in members:
        base = np.floor(pos[idx]).astype(int)
        for off in product((-1, 0, 1), repeat=pos.shape[1]):
            cubes.add(tuple(base + np.asarray(off)))
    return sorted(members), cubes


def cube_cluster_diameter(cubes: set[tuple]) -> float:
    """Euclidean diameter of a union of unit cubes given by their anchors."""
    if not cubes:
        return 0.0
    anchors = np.asarray(sorted(cubes), dtype=float)
    d = anchors.shape[1]
    corners = []
    for off in product((0.0, 1.0), repeat=d):
        corners.append(anchors + np.asarray(off))
    pts = np.concatenate(corners)
    lo, hi = pts.min(0), pts.max(0)
    # diameter of a union of axis boxes is attained at member corners
    best = 0.0
    for a in (lo, hi):
        best = max(best, float(np.sqrt(((pts - a) ** 2).sum(-1)).max()))
    diffs = pts[:, None, :] - pts[None, :, :] if len(pts) <= 600 else None
    if diffs is not None:
        best = max(best, float(np.sqrt((diffs ** 2).sum(-1)).max()))
    return best


# ---------------------------------------------------------------------------
# local strong saturation times


def _covers_box(accepted: FloatArray, target: Box, solid: ConvexSolid,
                min_half_rel: float = 2 ** -9):
    """Whether the difference-body translates of accepted centers cover the
    box: True / False (exact witnesses) or None when undecided at depth."""
    if solid.dim == 1:
        iv = IntervalVacancy(float(target.lo[0]), float(target.hi[0]))
        bw = solid.diameter
        for x in accepted[:, 0]:
            iv.subtract(x - bw, x + bw)
        return iv.measure == 0.0
    if len(accepted) == 0:
        return False
    side = float(target.sides.max())
    min_half = side * min_half_rel
    centers = ((target.lo + target.hi) / 2.0)[None, :]
    halves = np.array([side / 2.0])
    undecided = False
    from .vacancy import _pair_flags

    while len(centers):
        m = len(centers)
        cov = np.zeros(m, dtype=bool)
        inter = np.zeros(m, dtype=bool)
        for x in accepted:
            c, i = _pair_flags(centers - x[None, :], halves, solid)
            cov |= c
            inter |= i
        if np.any(~inter):
            return False  # a certified-vacant cell
        mixed = ~cov
        if not mixed.any():
            return True
        if halves[0] / 2.0 < min_half:
            undecided = True
            break
        parents = centers[mixed]
        h = halves[0] / 2.0
        offs = np.stack(np.meshgrid(*([np.array([-1.0, 1.0])] * solid.dim),
                                    indexing="ij"), axis=-1).reshape(-1, solid.dim)
        centers = (parents[:, None, :] + h * offs[None, :, :]).reshape(-1, solid.dim)
        halves = np.full(len(centers), h)
    return None if undecided else True


def local_saturation_time(cube_index, points: PointSet, solid: ConvexSolid,
                          subset_budget: int = 12):
    """Earliest time at which the cube is packed robustly against every subset
    of its moat points.

    At each candidate time t the cube's own points (marks <= t), joined with
    every subset of moat points with marks <= t, must fully cover the cube
    with difference-body translates of the accepted centers.  Subsets are
    enumerated exhaustively up to ``subset_budget`` moat points (exact=True);
    beyond that only the empty and full moat subsets are evaluated and the
    result is a lower bound (exact=False).
    """
    anchor = np.asarray(cube_index, dtype=float)
    d = solid.dim
    cube = Box(anchor, anchor + 1.0)
    pos, times = points.positions, points.times
    in_cube = ((pos >= anchor) & (pos < anchor + 1.0)).all(-1)
    in_plus = ((pos >= anchor - 1.0) & (pos < anchor + 2.0)).all(-1)
    in_moat = in_plus & ~in_cube
    big = Box(anchor - 2.0 - solid.diameter, anchor + 3.0 + solid.diameter)
    decisive = True
    for t in np.sort(np.unique(times)):
        core = np.flatnonzero(in_cube & (times <= t))
        moat = np.flatnonzero(in_moat & (times <= t))
        k = len(moat)
        exhaustive = k <= subset_budget
        subsets: list[np.ndarray]
        if exhaustive:
            subsets = [moat[[b for b in range(k) if mask & (1 << b)]]
                       for mask in range(2 ** k)]
        else:
            subsets = [moat[:0], moat]
        all_pack = True
        for sub in subsets:
            chosen = np.concatenate([core, sub])
            sub_points = PointSet.from_arrays(pos[chosen], times[chosen])
            st = pack_sequence(sub_points, PackingState(solid, big))
            verdict = _covers_box(st.positions, cube, solid)
            if verdict is None:
                decisive = False
                verdict = True  # optimistic at resolution; flagged via exact=False
            if not verdict:
                all_pack = False
                break
        if all_pack:
            return float(t), bool(exhaustive and decisive)
    return math.inf, bool(decisive)


def calibrate_t_star(solid: ConvexSolid, n_cubes: int, horizon: float,
                     seed: int, quantile: float = 0.9,
                     subset_budget: int = 10) -> float:
    """Empirical quantile of local saturation times over replicated cubes."""
    times = []
    for k in range(n_cubes):
        rng = np.random.default_rng(derive_seed(seed, "tstar", k))
        d = solid.dim
        plus = Box(np.full(d, -1.0), np.full(d, 2.0))
        pts = poisson_spacetime(plus, horizon, 1.0, rng)
        t_hat, _ = local_saturation_time(np.zeros(d, dtype=int), pts, solid,
                                         subset_budget)
        if math.isfinite(t_hat):
            times.append(t_hat)
    if not times:
        raise HorizonTooSmall("no cube reached local strong saturation within the horizon")
    return float(np.quantile(np.asarray(times), quantile))
