"""Monte Carlo harness for the saturation limit statements.

Estimates the jamming ratio E[N]/lam and its variance ratio Var[N]/lam over a
grid of region volumes, runs normality diagnostics on standardized counts,
and measures finite-dimensional covariances of the packing measures, whose
large-lam limit is white noise: lam^-1 Cov(<f,nu>, <g,nu>) -> sigma^2 int f g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .engine import pack_to_saturation
from .errors import ContractViolation
from .geometry import ConvexSolid
from .measures import TestFunction, integrate_point, integrate_volume, point_measure, volume_measure
from .parallel import derive_seed, parallel_map

FloatArray = NDArray[np.float64]


# ---------------------------------------------------------------------------
# saturation sweeps


@dataclass(eq=False)
class SweepResult:
    lambdas: list[float]
    reps: int
    samples: dict[float, FloatArray]  # per-lambda jamming counts
    epsilon: float

    def mean_ratio(self, lam: float) -> float:
        return float(np.mean(self.samples[lam])) / lam

    def var_ratio(self, lam: float) -> float:
        return float(np.var(self.samples[lam], ddof=1)) / lam

    def se_mean_ratio(self, lam: float) -> float:
        s = self.samples[lam]
        return float(np.std(s, ddof=1) / math.sqrt(len(s))) / lam

    def se_var_ratio(self, lam: float) -> float:
        # normal-theory standard error of a sample variance
        return self.var_ratio(lam) * math.sqrt(2.0 / (self.reps - 1))

    def standardized(self, lam: float) -> FloatArray:
        s = self.samples[lam]
        sd = np.std(s, ddof=1)
        if sd == 0:
            return np.zeros(len(s))
        return (s - np.mean(s)) / sd


def _saturation_count(lam: float, solid: ConvexSolid, epsilon: float, seed: int) -> int:
    rng = np.random.default_rng(seed)
    return pack_to_saturation(lam, solid, rng, epsilon).n_accepted


def sweep_jamming(lambda_grid, reps: int, solid: ConvexSolid, epsilon: float,
                  seed: int, threads: int | None = None) -> SweepResult:
    """Saturate ``reps`` independent replications at each lambda of an
    ascending grid; replication seeds derive from (seed, lambda, index)."""
    grid = [float(l) for l in lambda_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractViolation("lambda grid must be strictly ascending")
    if reps < 2:
        raise ContractViolation("need at least 2 replications")
    samples: dict[float, FloatArray] = {}
    for lam in grid:
        args = [(lam, solid, epsilon, derive_seed(seed, f"sweep:{lam!r}", r))
                for r in range(reps)]
        counts = parallel_map(_saturation_count, args, threads)
        samples[lam] = np.asarray(counts, dtype=float)
    return SweepResult(grid, reps, samples, epsilon)


# ---------------------------------------------------------------------------
# normality diagnostics


# Rational tail approximation of the standard normal CDF (Zelen & Severo
# form), absolute error < 7.5e-8; fixed here so KS values are bit-stable.
_P = 0.2316419
_B = (0.319381530, -0.356563782, 1.781477937, -1.821255978, 1.330274429)


def normal_cdf(x) -> FloatArray:
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    t = 1.0 / (1.0 + _P * ax)
    poly = t * (_B[0] + t * (_B[1] + t * (_B[2] + t * (_B[3] + t * _B[4]))))
    pdf = np.exp(-0.5 * ax * ax) / math.sqrt(2.0 * math.pi)
    upper = pdf * poly
    return np.where(x >= 0, 1.0 - upper, upper)


def ks_normal(samples) -> float:
    """Kolmogorov-Smirnov distance of standardized samples to N(0, 1).

    Samples are standardized by their own mean and standard deviation; a
    degenerate sample (zero spread) standardizes to a point mass at 0.
    """
    s = np.asarray(samples, dtype=float)
    if len(s) < 20:
        raise ContractViolation("need at least 20 samples for the KS diagnostic")
    sd = np.std(s, ddof=1)
    z = np.sort((s - np.mean(s)) / sd) if sd > 0 else np.zeros(len(s))
    n = len(z)
    cdf = normal_cdf(z)
    i = np.arange(1, n + 1)
    return float(np.max(np.maximum(i / n - cdf, cdf - (i - 1) / n)))


# ---------------------------------------------------------------------------
# covariance experiments


@dataclass(eq=False)
class CovarianceResult:
    matrix: FloatArray       # lam^-1 * sample covariance of the integrals
    se: FloatArray           # normal-theory standard errors, same scale
    reps: int
    integrals: FloatArray    # (reps, n_functions) raw integrals


def _measure_integrals(lam: float, solid: ConvexSolid, epsilon: float, seed: int,
                       f_list: tuple, which: str, tol: float) -> list[float]:
    rng = np.random.default_rng(seed)
    state = pack_to_saturation(lam, solid, rng, epsilon).state
    if which == "point":
        m = point_measure(state, lam)
        return [integrate_point(f, m) for f in f_list]
    m = volume_measure(state, lam)
    return [integrate_volume(f, m, tol) for f in f_list]


def covariance_experiment(f_list: list[TestFunction], lam: float, reps: int, seed: int,
                          which: str = "point", *, solid: ConvexSolid, epsilon: float = 1e-6,
                          tol: float = 1e-6, threads: int | None = None) -> CovarianceResult:
    """Sample covariance matrix of test-function integrals over replications,
    divided by lam."""
    if reps < 30:
        raise ContractViolation("need at least 30 replications")
    if which not in ("point", "volume"):
        raise ContractViolation("which must be 'point' or 'volume'")
    args = [(lam, solid, epsilon, derive_seed(seed, f"cov:{which}", r), tuple(f_list), which, tol)
            for r in range(reps)]
    rows = np.asarray(parallel_map(_measure_integrals, args, threads))
    cov = np.atleast_2d(np.cov(rows, rowvar=False, ddof=1)) / lam
    diag = np.diag(cov)
    se = np.sqrt((np.outer(diag, diag) + cov ** 2) / (reps - 1))
    return CovarianceResult(cov, se, reps, rows)


# ---------------------------------------------------------------------------
# convergence-rate fit


@dataclass(eq=False)
class RateFit:
    exponent: float
    r_squared: float
    mu_hat: float
    inconclusive: bool
    dropped: int = 0


def rate_fit(sweep: SweepResult, d: int) -> RateFit:
    """Fitted decay exponent of |mean ratio - mu_hat| against lambda.

    mu_hat extrapolates the two largest grid points assuming a lambda^(-1/d)
    error term; grid points whose residual is within 3 standard errors of
    zero are dropped, and the fit is flagged inconclusive when fewer than 3
    informative points remain.
    """
    lams = np.asarray(sweep.lambdas, dtype=float)
    if len(lams) < 3:
        raise ContractViolation("need at least 3 grid points")
    means = np.asarray([sweep.mean_ratio(l) for l in lams])
    ses = np.asarray([sweep.se_mean_ratio(l) for l in lams])
    w1, w2 = lams[-1] ** (-1.0 / d), lams[-2] ** (-1.0 / d)
    mu_hat = means[-1] - (means[-2] - means[-1]) * w1 / (w2 - w1)
    resid = means - mu_hat
    keep = np.abs(resid) > 3.0 * ses
    dropped = int(len(lams) - keep.sum())
    if keep.sum() < 3:
        return RateFit(math.nan, 0.0, float(mu_hat), inconclusive=True, dropped=dropped)
    x = np.log(lams[keep])
    y = np.log(np.abs(resid[keep]))
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), r2, float(mu_hat), inconclusive=False, dropped=dropped)
