"""Rescaled packing measures and test-function integrals.

A packing over the side-lam^(1/d) cube induces two measures on the unit
scale: the point measure (one unit atom per accepted center, positions
divided by lam^(1/d)) and the volume measure (Lebesgue measure of the union
of rescaled accepted solids, normalized by lam/|S| so both measures carry
total mass N).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .engine import PackingState
from .errors import ContractViolation
from .geometry import Box, ConvexSolid, clipped_volume

FloatArray = NDArray[np.float64]


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True, eq=False)
class BoxIndicator:
    """Indicator of an axis-aligned half-open box."""

    box: Box

    def __call__(self, points: FloatArray) -> FloatArray:
        return self.box.contains(points).astype(float)

    @property
    def bound(self) -> float:
        return 1.0


@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """Constant value on each of a list of disjoint boxes, zero elsewhere."""

    boxes: tuple[Box, ...]
    values: tuple[float, ...]

    def __call__(self, points: FloatArray) -> FloatArray:
        out = np.zeros(len(points))
        for b, v in zip(self.boxes, self.values):
            out = np.where(b.contains(points), v, out)
        return out

    @property
    def bound(self) -> float:
        return max((abs(v) for v in self.values), default=0.0)


@dataclass(frozen=True, eq=False)
class BoundedCallback:
    """User callback with a declared sup-norm bound; the caller attests it is
    bounded and continuous almost everywhere."""

    fn: Callable[[FloatArray], FloatArray]
    declared_bound: float

    def __call__(self, points: FloatArray) -> FloatArray:
        vals = np.asarray(self.fn(points), dtype=float)
        if vals.shape != (len(points),):
            raise ContractViolation("callback must map an (n, d) array to an (n,) array")
        if np.any(np.abs(vals) > self.declared_bound * (1 + 1e-12)):
            raise ContractViolation("callback exceeded its declared bound")
        return vals

    @property
    def bound(self) -> float:
        return self.declared_bound


TestFunction = BoxIndicator | PiecewiseConstant | BoundedCallback


# ---------------------------------------------------------------------------
# measures


@dataclass(eq=False)
class PackingPointMeasure:
    atoms: FloatArray  # rescaled accepted centers in [0,1)^d
    lam: float

    @property
    def total_mass(self) -> float:
        return float(len(self.atoms))


@dataclass(eq=False)
class PackingVolumeMeasure:
    centers: FloatArray            # rescaled accepted centers
    scaled_solid: ConvexSolid      # lam^(-1/d) S
    lam: float
    original_volume: float         # |S|

    @property
    def normalization(self) -> float:
        return self.lam / self.original_volume

    @property
    def total_mass(self) -> float:
        # accepted solids are pairwise disjoint up to null boundary sets
        return self.normalization * len(self.centers) * self.scaled_solid.volume


def point_measure(state: PackingState, lam: float) -> PackingPointMeasure:
    scale = lam ** (1.0 / state.solid.dim)
    return PackingPointMeasure(state.positions / scale, lam)


def volume_measure(state: PackingState, lam: float) -> PackingVolumeMeasure:
    scale = lam ** (1.0 / state.solid.dim)
    return PackingVolumeMeasure(state.positions / scale, state.solid.scale(1.0 / scale),
                                lam, state.solid.volume)


def integrate_point(f: TestFunction, m: PackingPointMeasure) -> float:
    """Sum of f over the atoms."""
    if len(m.atoms) == 0:
        return 0.0
    return float(np.sum(f(m.atoms)))


def _indicator_boxes(f: TestFunction) -> list[tuple[Box, float]] | None:
    if isinstance(f, BoxIndicator):
        return [(f.box, 1.0)]
    if isinstance(f, PiecewiseConstant):
        return list(zip(f.boxes, f.values))
    return None


def _box_integral(m: PackingVolumeMeasure, clip: Box, tol: float) -> float:
    """Lebesgue mass of the union of rescaled solids inside one box."""
    centers = m.centers
    if len(centers) == 0:
        return 0.0
    solid = m.scaled_solid
    if solid.kind == "ball":
        bb = np.full(solid.dim, solid.radius)
    elif solid.kind == "box":
        bb = solid.half_extents
    else:
        bb = np.abs(solid.vertices).max(axis=0)
    lo_ok = centers - bb >= clip.lo
    hi_ok = centers + bb <= clip.hi
    fully_in = (lo_ok & hi_ok).all(-1)
    disjoint = ((centers + bb <= clip.lo) | (centers - bb >= clip.hi)).any(-1)
    total = float(fully_in.sum()) * solid.volume
    partial = np.flatnonzero(~fully_in & ~disjoint)
    if solid.dim == 1:
        lo = np.maximum(centers[partial, 0] - bb[0], clip.lo[0])
        hi = np.minimum(centers[partial, 0] + bb[0], clip.hi[0])
        total += float(np.maximum(hi - lo, 0.0).sum())
    else:
        for k in partial:
            total += clipped_volume(solid, centers[k], clip, tol)
    return total


def integrate_volume(f: TestFunction, m: PackingVolumeMeasure, tol: float = 1e-6) -> float:
    """Integral of f against the volume measure, relative quadrature error <= tol."""
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    boxes = _indicator_boxes(f)
    if boxes is not None:
        return m.normalization * sum(v * _box_integral(m, b, tol) for b, v in boxes)
    return m.normalization * sum(
        _callback_solid_integral(f, m.scaled_solid, c, tol) for c in m.centers)


def _callback_solid_integral(f: BoundedCallback, solid: ConvexSolid, center: FloatArray,
                             tol: float) -> float:
    """Midpoint quadrature of f over one translated solid, dyadically refined
    until successive estimates agree within tol relative to bound * |S|."""
    if solid.kind == "ball":
        bb = np.full(solid.dim, solid.radius)
    elif solid.kind == "box":
        bb = solid.half_extents
    else:
        bb = np.abs(solid.vertices).max(axis=0)
    prev = None
    for level in range(2, 9):
        n = 2 ** level
        axes = [np.linspace(center[ax] - bb[ax], center[ax] + bb[ax], n, endpoint=False)
                + bb[ax] / n for ax in range(solid.dim)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, solid.dim)
        inside = _inside_solid(solid, grid - center)
        cell_vol = float(np.prod(2.0 * bb / n))
        est = float(np.sum(f(grid[inside])) * cell_vol)
        if prev is not None and abs(est - prev) <= tol * max(f.bound * solid.volume, 1e-300):
            return est
        prev = est
    return prev if prev is not None else 0.0


def _inside_solid(solid: ConvexSolid, rel: FloatArray) -> NDArray[np.bool_]:
    if solid.kind == "ball":
        return (rel ** 2).sum(-1) <= solid.radius ** 2
    if solid.kind == "box":
        return (np.abs(rel) <= solid.half_extents).all(-1)
    from .geometry import _halfplanes

    n, c = _halfplanes(solid.vertices)
    return (rel @ n.T <= c).all(-1)
