"""Jamming variability under boundary conditioning.

The count packed into a box stays genuinely random no matter how the outside
is pre-packed.  The apparatus: a certified gauge-norm periodic packing of the
plane/line, two slightly inflated copies of it, exact point counts n1/n2 in a
shrunken box against a surface-order bound n3 for the shell, first-arrival
race events whose probabilities are positive independently of the boundary,
and a direct conditional-variance experiment over adversarial boundary
designs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from numpy.typing import NDArray
from scipy.special import gammaln

from .engine import pack_with_boundary, validate_boundary
from .errors import ContractViolation, ResolutionTooCoarse, ValidationError
from .geometry import Box, ConvexSolid
from .parallel import derive_seed, parallel_map

FloatArray = NDArray[np.float64]


# ---------------------------------------------------------------------------
# periodic packed sets


def _image_offsets(dim: int) -> FloatArray:
    return np.asarray(list(product((-1.0, 0.0, 1.0), repeat=dim)))


def _min_pair_gauge_torus(gens: FloatArray, solid: ConvexSolid) -> float:
    """Minimum gauge distance between distinct generators across unit-torus images."""
    offs = _image_offsets(gens.shape[1])
    best = math.inf
    for k, g in enumerate(gens):
        others = gens[None, :, :] + offs[:, None, :]  # images of everything
        gd = solid.gauge(others - g)
        gd[:, k][np.abs(offs).sum(-1) == 0] = math.inf  # the point itself
        best = min(best, float(gd.min()))
    return best


def covering_radius_grid(gens: FloatArray, solid: ConvexSolid, resolution: float) -> float:
    """Max over a fundamental-domain grid of the gauge distance to the set."""
    d = gens.shape[1]
    axes = [np.arange(0.0, 1.0, resolution) + resolution / 2.0] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    offs = _image_offsets(d)
    images = (gens[None, :, :] + offs[:, None, :]).reshape(-1, d)
    best = np.full(len(grid), math.inf)
    chunk = 200_000 // max(len(images), 1) + 1
    for c0 in range(0, len(grid), chunk):
        g = grid[c0:c0 + chunk]
        dist = solid.gauge(g[:, None, :] - images[None, :, :]).min(-1)
        best[c0:c0 + len(g)] = dist
    return float(best.max())


@dataclass(eq=False)
class PeriodicPackedSet:
    """Generators of a period-1 packed set with a certified covering radius."""

    generators: FloatArray
    solid: ConvexSolid
    beta_hat: float            # certified sup of gauge distance to the set
    resolution: float
    slack: float               # Lipschitz certification margin added to the grid max

    @property
    def points_per_cell(self) -> int:
        return len(self.generators)

    def verify(self) -> None:
        if _min_pair_gauge_torus(self.generators, self.solid) < 1.0:
            raise ValidationError("periodic set is not packed")
        if self.beta_hat >= 1.0:
            raise ValidationError("periodic set is not maximally packed (beta >= 1)")


def build_periodic_packed_set(solid: ConvexSolid, resolution: float = 1.0 / 128.0,
                              rng: np.random.Generator | None = None) -> PeriodicPackedSet:
    """Construct a period-1 packed set with certified covering radius < 1.

    Candidate rectangular (and, in d=2, offset-row) lattices are screened for
    the packing constraint, greedily densified on a grid, and certified by a
    covering sweep plus a Lipschitz slack term.  Requires 2 * diameter < 1.
    """
    if 2.0 * solid.diameter >= 1.0:
        raise ContractViolation("period-1 packed sets need 2 * diameter < 1")
    d = solid.dim
    axis_gauge = np.asarray([float(solid.gauge(np.eye(d)[ax])) for ax in range(d)])
    m = np.floor(axis_gauge).astype(int)  # spacing 1/m_i keeps axis gauge >= 1
    candidates: list[FloatArray] = []

    def rect(ms) -> FloatArray:
        axes = [np.arange(mi) / mi for mi in ms]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)

    candidates.append(rect(m))
    if d == 2:
        for m1, m2 in ((m[0], m[1]), (m[0] + 1, m[1]), (m[0], m[1] + 1)):
            rows = []
            for j in range(m2):
                xs = (np.arange(m1) + 0.5 * (j % 2)) / m1
                rows.append(np.stack([xs % 1.0, np.full(m1, j / m2)], axis=1))
            candidates.append(np.concatenate(rows))

    slack = solid.max_gauge_per_unit_length * resolution * math.sqrt(d) / 2.0
    best: tuple[float, FloatArray] | None = None
    for gens in candidates:
        if _min_pair_gauge_torus(gens, solid) < 1.0:
            continue
        beta_grid = covering_radius_grid(gens, solid, resolution)
        if best is None or beta_grid < best[0]:
            best = (beta_grid, gens)
    if best is None:
        raise ResolutionTooCoarse("no candidate lattice satisfies the packing constraint")
    beta_grid, gens = best

    # greedy densification: admit any grid point at gauge distance >= 1 from
    # the current set (rarely fires for the lattice starts; kept for safety)
    axes = [np.arange(0.0, 1.0, resolution)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    if rng is not None:
        grid = grid[rng.permutation(len(grid))]
    offs = _image_offsets(d)
    added = []
    current = gens
    images = (current[None, :, :] + offs[:, None, :]).reshape(-1, d)
    for w in grid:
        if float(solid.gauge(w - images).min()) >= 1.0:
            added.append(w)
            current = np.concatenate([current, w[None, :]])
            images = (current[None, :, :] + offs[:, None, :]).reshape(-1, d)
    if added:
        gens = current
        beta_grid = covering_radius_grid(gens, solid, resolution)

    beta_hat = beta_grid + slack
    if beta_hat >= 1.0:
        raise ResolutionTooCoarse(
            f"covering certification failed: grid max {beta_grid:.4f} + slack {slack:.4f} >= 1; "
            "use a finer resolution")
    out = PeriodicPackedSet(gens, solid, beta_hat, resolution, slack)
    out.verify()
    return out


# ---------------------------------------------------------------------------
# delta and counts


def feasible_delta_interval(beta_hat: float) -> tuple[float, float]:
    """Open interval of inflation margins delta with beta (1 + 6 delta) < 1 - 2 delta."""
    if beta_hat >= 1.0:
        raise ContractViolation("beta must be < 1")
    return 0.0, (1.0 - beta_hat) / (6.0 * beta_hat + 2.0)


def choose_delta(beta_hat: float) -> float:
    lo, hi = feasible_delta_interval(beta_hat)
    return (lo + hi) / 2.0


@dataclass(eq=False)
class ShellCounts:
    L: float
    n1: int
    n2: int
    n3_bound: int
    c1: int


def _count_scaled_in_box(Lset: PeriodicPackedSet, scale: float, half: float) -> int:
    """Exact number of points of scale * (generators + Z^d) in [-half, half]^d."""
    total = 0
    for g in Lset.generators:
        per_axis = np.floor(half / scale - g) - np.ceil(-half / scale - g) + 1.0
        per_axis = np.maximum(per_axis, 0.0)
        total += int(round(float(np.prod(per_axis))))
    return total


def counts_n1_n2_n3(Lset: PeriodicPackedSet, delta: float, L: float) -> ShellCounts:
    """Counts of the inflated sets in Box(L - 4) and a shell packing bound.

    n_i counts (1 + 3 i delta) * set inside the closed box of side L - 4;
    n3 bounds any packed subset of the shell Box(L) minus Box(L - 6) by the
    dilated-shell volume over the half-gauge-ball volume (a certified upper
    bound of surface order).
    """
    if L <= 6.0:
        raise ContractViolation("L too small: the shell Box(L) \\ Box(L-6) is degenerate")
    lo, hi = feasible_delta_interval(Lset.beta_hat)
    if not (lo < delta < hi):
        raise ContractViolation(
            f"delta {delta} infeasible for beta {Lset.beta_hat:.4f}; need delta in ({lo:.4g}, {hi:.4g})")
    d = Lset.solid.dim
    d_s = Lset.solid.diameter
    n1 = _count_scaled_in_box(Lset, 1.0 + 3.0 * delta, (L - 4.0) / 2.0)
    n2 = _count_scaled_in_box(Lset, 1.0 + 6.0 * delta, (L - 4.0) / 2.0)
    outer = (L + d_s) ** d
    inner = max(L - 6.0 - d_s, 0.0) ** d
    n3 = int(math.floor((outer - inner) / Lset.solid.half_gauge_ball_volume))
    return ShellCounts(L, n1, n2, n3, Lset.points_per_cell)


def find_L0(Lset: PeriodicPackedSet, delta: float, L_max: float, step: float = 1.0) -> ShellCounts:
    """Smallest grid L with n3 < n1 - n2; the box side where volume order
    beats surface order."""
    L = 6.0 + step
    while L <= L_max:
        c = counts_n1_n2_n3(Lset, delta, L)
        if c.n3_bound < c.n1 - c.n2:
            return c
        L += step
    raise ContractViolation(f"no L <= {L_max} satisfies the counting inequality; increase L_max")


# ---------------------------------------------------------------------------
# first-arrival race events


@dataclass(eq=False)
class EventProbabilities:
    L: float
    delta: float
    n_balls: tuple[int, int]
    log_p: tuple[float, float]          # exact log probabilities
    p_mc: tuple[float, float] | None    # Monte Carlo estimates (None if not run)
    ci_low: tuple[float, float] | None  # Wilson lower bounds
    mc_reps: int = 0
    conclusive: bool = True


def _race_log_probability(n: int, ball_vol: float, box_vol: float) -> float:
    """log P[every one of n disjoint equal-volume targets receives a Poisson
    arrival before the first arrival anywhere else in the box].

    With exponential first-arrival times this is a Beta integral:
    P = a * B(a, n + 1) with a = (box - n * ball) / ball.
    """
    if n == 0:
        return 0.0
    v_out = box_vol - n * ball_vol
    if v_out <= 0:
        return 0.0
    a = v_out / ball_vol
    return math.log(a) + float(gammaln(a) + gammaln(n + 1) - gammaln(a + n + 1))


def _wilson_lower(successes: int, n: int, z: float = 1.959964) -> float:
    if n == 0:
        return 0.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = p + z * z / (2 * n)
    rad = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return max((center - rad) / denom, 0.0)


def _simulate_race(Lset: PeriodicPackedSet, delta: float, L: float, i: int,
                   reps: int, rng: np.random.Generator, n_targets: int) -> int:
    """Count of replications where all inflated-set targets in Box(L-4) get an
    arrival before any arrival outside the targets (order statistics only)."""
    scale = 1.0 + 3.0 * i * delta
    solid = Lset.solid
    d = solid.dim
    half = (L - 4.0) / 2.0
    wins = 0
    hit_sets: list[set] = [set() for _ in range(reps)]
    alive = np.arange(reps)
    while len(alive):
        pts = rng.uniform(-L / 2.0, L / 2.0, size=(len(alive), d))
        ids = _hit_ids(Lset, scale, half, delta, pts)
        still = []
        for row, rep in enumerate(alive):
            if ids[row] < 0:
                continue  # arrival outside the targets: this replication loses
            hs = hit_sets[rep]
            hs.add(int(ids[row]))
            if len(hs) == n_targets:
                wins += 1
            else:
                still.append(rep)
        alive = np.asarray(still, dtype=int)
    return wins


def _hit_ids(Lset: PeriodicPackedSet, scale: float, half: float, delta: float,
             pts: FloatArray) -> NDArray[np.int64]:
    solid = Lset.solid
    d = solid.dim
    m = len(pts)
    best_gd = np.full(m, math.inf)
    best_id = np.full(m, -1, dtype=np.int64)
    for gi, g in enumerate(Lset.generators):
        z = np.rint(pts / scale - g)
        centers = scale * (z + g)
        gd = solid.gauge(pts - centers)
        inside_box = (np.abs(centers) <= half + 1e-12).all(-1)
        better = (gd < best_gd) & inside_box
        code = z[:, 0].astype(np.int64)
        for ax in range(1, d):
            code = code * 2_000_003 + z[:, ax].astype(np.int64)
        best_id = np.where(better, code * len(Lset.generators) + gi, best_id)
        best_gd = np.where(better, gd, best_gd)
    best_id[best_gd > delta] = -1
    return best_id


def estimate_event_probabilities(Lset: PeriodicPackedSet, delta: float, L: float,
                                 reps: int, rng: np.random.Generator,
                                 budget: int = 200_000) -> EventProbabilities:
    """Race probabilities for both inflated sets: exact values always, plus
    Monte Carlo with Wilson intervals, doubling replications until the lower
    bound clears zero or the budget is hit (then flagged inconclusive)."""
    if reps < 1:
        raise ContractViolation("reps must be at least 1")
    counts = counts_n1_n2_n3(Lset, delta, L)
    ball_vol = Lset.solid.diff_volume * delta ** Lset.solid.dim
    box_vol = L ** Lset.solid.dim
    logs = (_race_log_probability(counts.n1, ball_vol, box_vol),
            _race_log_probability(counts.n2, ball_vol, box_vol))
    wins = [0, 0]
    used = 0
    n_now = reps
    conclusive = False
    while used < budget:
        n_now = min(n_now, budget - used)
        for i, n_tgt in ((0, counts.n1), (1, counts.n2)):
            wins[i] += _simulate_race(Lset, delta, L, i + 1, n_now, rng, n_tgt)
        used += n_now
        if all(_wilson_lower(w, used) > 0 for w in wins):
            conclusive = True
            break
        n_now *= 2
    p_mc = (wins[0] / used, wins[1] / used)
    ci = (_wilson_lower(wins[0], used), _wilson_lower(wins[1], used))
    return EventProbabilities(L, delta, (counts.n1, counts.n2), logs, p_mc, ci,
                              used, conclusive)


# ---------------------------------------------------------------------------
# boundary designs and the conditional-variance experiment


def design_empty(solid: ConvexSolid, L: float) -> FloatArray:
    return np.empty((0, solid.dim))


def design_lattice_ring(solid: ConvexSolid, L: float, offset: float = 0.05,
                        spacing: float = 1.05) -> FloatArray:
    """Deterministic admissible ring: points walked along every face of the
    box at the given offset, kept when the gauge distance to all previous
    ring points strictly exceeds 1 (times the spacing factor)."""
    d = solid.dim
    if d == 1:
        return np.asarray([[-offset], [L + offset]])
    out: list[np.ndarray] = []
    step = spacing * solid.diameter
    n_steps = max(int(L / step) + 1, 1)
    ts = np.linspace(0.0, L, n_steps, endpoint=False)
    for ax in range(d):
        for side_val in (-offset, L + offset):
            for t in ts:
                p = np.zeros(d)
                p[ax] = side_val
                for other_ax, coord in zip((a for a in range(d) if a != ax),
                                           (t,) * (d - 1)):
                    p[other_ax] = coord
                if all(float(solid.gauge(p - q)) > 1.0 for q in out):
                    out.append(p)
    return np.asarray(out) if out else np.empty((0, d))


def design_greedy_ring(solid: ConvexSolid, L: float, rng: np.random.Generator,
                       offset: float = 0.05, attempts: int = 4000) -> FloatArray:
    """Randomized admissible ring: greedy insertion on a thin band outside the box."""
    d = solid.dim
    band = 0.25 * solid.diameter
    out: list[np.ndarray] = []
    for _ in range(attempts):
        p = rng.uniform(-offset - band, L + offset + band, size=d)
        excess = float(np.max(np.maximum(-p, p - L)))
        if not (offset <= excess <= offset + band):
            continue
        if all(float(solid.gauge(p - q)) > 1.0 for q in out):
            out.append(p)
    return np.asarray(out) if out else np.empty((0, d))


@dataclass(eq=False)
class VarianceRow:
    eta_id: str
    n_boundary: int
    reps: int
    mean: float
    var_hat: float
    ci_low: float
    ci_high: float
    counts: FloatArray = field(repr=False, default=None)


def _boundary_count(L: float, eta: FloatArray, solid: ConvexSolid, epsilon: float,
                    seed: int) -> int:
    rng = np.random.default_rng(seed)
    return pack_with_boundary(L, eta, solid, rng, epsilon)


def conditional_variance_experiment(L: float, eta_designs: dict[str, FloatArray],
                                    reps: int, epsilon: float, seed: int,
                                    solid: ConvexSolid, threads: int | None = None,
                                    n_boot: int = 2000) -> list[VarianceRow]:
    """Sample variance of the conditioned count for each boundary design,
    with a percentile-bootstrap confidence interval."""
    if reps < 2:
        raise ContractViolation("need at least 2 replications")
    rows = []
    for name, eta in eta_designs.items():
        eta = validate_boundary(eta, Box.cube(L, solid.dim), solid)
        args = [(L, eta, solid, epsilon, derive_seed(seed, f"var:{name}", r))
                for r in range(reps)]
        counts = np.asarray(parallel_map(_boundary_count, args, threads), dtype=float)
        var_hat = float(np.var(counts, ddof=1))
        boot_rng = np.random.default_rng(derive_seed(seed, f"boot:{name}", 0))
        boots = np.empty(n_boot)
        for b in range(n_boot):
            take = boot_rng.integers(0, reps, size=reps)
            boots[b] = np.var(counts[take], ddof=1)
        rows.append(VarianceRow(name, len(eta), reps, float(np.mean(counts)), var_hat,
                                float(np.quantile(boots, 0.025)),
                                float(np.quantile(boots, 0.975)), counts))
    return rows


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass(eq=False)
class PipelineReport:
    solid_spec: str
    beta_hat: float
    delta: float
    counts: ShellCounts
    events: EventProbabilities
    variance_rows: list[VarianceRow]

    @property
    def min_variance_row(self) -> VarianceRow:
        return min(self.variance_rows, key=lambda r: r.var_hat)


def run_variability_pipeline(solid: ConvexSolid, seed: int, reps: int = 12,
                             L_max: float = 400.0, epsilon: float = 1e-6,
                             resolution: float = 1.0 / 128.0,
                             designs: tuple[str, ...] = ("empty", "lattice_ring", "greedy_ring"),
                             mc_reps: int = 64, mc_budget: int = 4096,
                             threads: int | None = None,
                             variance_L: float | None = None) -> PipelineReport:
    """Full jamming-variability run: certified periodic packing, feasible
    inflation margin, counting threshold L0, race probabilities at L0, and
    the boundary-conditioned variance table."""
    rng = np.random.default_rng(derive_seed(seed, "pipeline", 0))
    Lset = build_periodic_packed_set(solid, resolution, rng)
    delta = choose_delta(Lset.beta_hat)
    counts = find_L0(Lset, delta, L_max)
    events = estimate_event_probabilities(Lset, delta, counts.L, mc_reps, rng,
                                          budget=mc_budget)
    eta: dict[str, FloatArray] = {}
    L_var = counts.L if variance_L is None else variance_L
    for name in designs:
        if name == "empty":
            eta[name] = design_empty(solid, L_var)
        elif name == "lattice_ring":
            eta[name] = design_lattice_ring(solid, L_var)
        elif name == "greedy_ring":
            eta[name] = design_greedy_ring(solid, L_var, rng)
        else:
            raise ValidationError(f"unknown boundary design {name!r}")
    var_rows = conditional_variance_experiment(L_var, eta, reps, epsilon, seed,
                                               solid, threads)
    return PipelineReport(solid.spec_string(), Lset.beta_hat, delta, counts,
                          events, var_rows)
