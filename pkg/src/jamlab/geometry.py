"""Convex solids, their difference bodies, gauge norms and clipped volumes.

A solid S is a bounded closed convex body with centroid at the origin.  Two
translates x+S and y+S overlap iff x-y lies in the difference body
D = S (+) (-S), so every overlap / adjacency question reduces to membership
in D, and the Minkowski gauge of D ("gauge norm") turns non-overlap into a
metric statement: the translates are disjoint iff the gauge distance of the
centers exceeds 1.

Supported shapes: balls and axis-aligned boxes in any dimension, centrally
symmetric convex polygons in dimension 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ContractViolation, ValidationError

FloatArray = NDArray[np.float64]

_UNIT_BALL_VOLUME = {1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}


def _unit_ball_volume(d: int) -> float:
    if d in _UNIT_BALL_VOLUME:
        return _UNIT_BALL_VOLUME[d]
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


def _polygon_area(vertices: FloatArray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _polygon_centroid(vertices: FloatArray) -> FloatArray:
    x, y = vertices[:, 0], vertices[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * float(np.sum(cross))
    cx = float(np.sum((x + xn) * cross)) / (6.0 * area)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * area)
    return np.array([cx, cy])


def _ensure_ccw(vertices: FloatArray) -> FloatArray:
    return vertices if _polygon_area(vertices) > 0 else vertices[::-1].copy()


def _check_convex(vertices: FloatArray) -> None:
    n = len(vertices)
    e = np.roll(vertices, -1, axis=0) - vertices
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if np.any(cross <= 0):
        raise ContractViolation("polygon vertices must describe a strictly convex CCW polygon")
    if n < 3:
        raise ContractViolation("polygon needs at least 3 vertices")


def _minkowski_sum_ccw(p: FloatArray, q: FloatArray) -> FloatArray:
    """Minkowski sum of two convex CCW polygons by edge merging."""

    def bottom_start(v: FloatArray) -> int:
        return int(np.lexsort((v[:, 0], v[:, 1]))[0])

    ip, iq = bottom_start(p), bottom_start(q)
    p = np.roll(p, -ip, axis=0)
    q = np.roll(q, -iq, axis=0)
    ep = np.roll(p, -1, axis=0) - p
    eq = np.roll(q, -1, axis=0) - q
    out = [p[0] + q[0]]
    i = j = 0
    while i < len(p) or j < len(q):
        if i >= len(p):
            step = eq[j]
            j += 1
        elif j >= len(q):
            step = ep[i]
            i += 1
        else:
            cross = ep[i, 0] * eq[j, 1] - ep[i, 1] * eq[j, 0]
            if cross > 0:
                step = ep[i]
                i += 1
            elif cross < 0:
                step = eq[j]
                j += 1
            else:  # parallel edges merge
                step = ep[i] + eq[j]
                i += 1
                j += 1
        out.append(out[-1] + step)
    verts = np.array(out[:-1])
    # collapse collinear runs left by merged edges
    keep = []
    n = len(verts)
    for k in range(n):
        a, b, c = verts[k - 1], verts[k], verts[(k + 1) % n]
        if abs((b - a)[0] * (c - b)[1] - (b - a)[1] * (c - b)[0]) > 1e-12 * (1 + np.abs(verts).max()) ** 2:
            keep.append(k)
    return verts[keep]


def _halfplanes(vertices: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Outward edge normals n_j and offsets c_j with {x : n_j . x <= c_j} for a CCW polygon around 0."""
    e = np.roll(vertices, -1, axis=0) - vertices
    normals = np.stack([e[:, 1], -e[:, 0]], axis=1)
    offsets = np.einsum("ij,ij->i", normals, vertices)
    if np.any(offsets <= 0):
        raise ContractViolation("polygon must contain the origin in its interior")
    return normals, offsets


@dataclass(frozen=True, eq=False)
class ConvexSolid:
    """A convex solid with derived difference-body data.

    Use the :func:`ball`, :func:`box` and :func:`symmetric_polygon` factories
    rather than the raw constructor.
    """

    kind: str                      # "ball" | "box" | "poly"
    dim: int
    radius: float | None = None            # ball
    half_extents: FloatArray | None = None  # box
    vertices: FloatArray | None = None      # poly (CCW, centered)
    # derived
    diameter: float = field(init=False)
    volume: float = field(init=False)
    diff_vertices: FloatArray | None = field(init=False, default=None)
    diff_normals: FloatArray | None = field(init=False, default=None)
    diff_offsets: FloatArray | None = field(init=False, default=None)

    def __post_init__(self) -> None:
        if self.kind == "ball":
            if self.radius is None or self.radius <= 0:
                raise ContractViolation("ball radius must be positive")
            d_s = 2.0 * self.radius
            vol = _unit_ball_volume(self.dim) * self.radius ** self.dim
        elif self.kind == "box":
            h = np.asarray(self.half_extents, dtype=float)
            if h.ndim != 1 or len(h) != self.dim or np.any(h <= 0):
                raise ContractViolation("box half extents must be positive, one per axis")
            object.__setattr__(self, "half_extents", h)
            d_s = 2.0 * float(np.linalg.norm(h))
            vol = float(np.prod(2.0 * h))
        elif self.kind == "poly":
            if self.dim != 2:
                raise ContractViolation("polygon solids are only supported in dimension 2")
            v = np.asarray(self.vertices, dtype=float)
            _check_convex(v)
            diffs = v[:, None, :] - v[None, :, :]
            d_s = float(np.sqrt((diffs ** 2).sum(-1)).max())
            vol = _polygon_area(v)
            dv = _minkowski_sum_ccw(v, -v)  # negation preserves CCW orientation
            n, c = _halfplanes(dv)
            object.__setattr__(self, "diff_vertices", dv)
            object.__setattr__(self, "diff_normals", n)
            object.__setattr__(self, "diff_offsets", c)
        else:
            raise ContractViolation(f"unknown solid kind {self.kind!r}")
        object.__setattr__(self, "diameter", d_s)
        object.__setattr__(self, "volume", vol)

    # -- difference body -------------------------------------------------

    @property
    def diff_volume(self) -> float:
        """Volume of the difference body D."""
        if self.kind == "ball":
            return _unit_ball_volume(self.dim) * (2.0 * self.radius) ** self.dim
        if self.kind == "box":
            return float(np.prod(4.0 * self.half_extents))
        return _polygon_area(self.diff_vertices)

    @property
    def half_gauge_ball_volume(self) -> float:
        """Volume of the gauge ball of radius 1/2 (half-scaled difference body)."""
        return self.diff_volume / 2.0 ** self.dim

    def diff_bounding_halfwidths(self) -> FloatArray:
        """Per-axis halfwidths of the bounding box of D."""
        if self.kind == "ball":
            return np.full(self.dim, 2.0 * self.radius)
        if self.kind == "box":
            return 2.0 * self.half_extents
        return np.abs(self.diff_vertices).max(axis=0)

    @property
    def max_gauge_per_unit_length(self) -> float:
        """Lipschitz constant of the gauge norm w.r.t. Euclidean distance."""
        if self.kind == "ball":
            return 1.0 / (2.0 * self.radius)
        if self.kind == "box":
            return float(np.max(1.0 / (2.0 * self.half_extents)))
        return float(np.max(np.linalg.norm(self.diff_normals, axis=1) / self.diff_offsets))

    # -- gauge / overlap -------------------------------------------------

    def gauge(self, x: FloatArray) -> FloatArray:
        """Gauge norm of displacement vectors, vectorized over the leading axes."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ContractViolation(f"expected vectors of dimension {self.dim}, got shape {x.shape}")
        if self.kind == "ball":
            return np.sqrt((x ** 2).sum(-1)) / (2.0 * self.radius)
        if self.kind == "box":
            return (np.abs(x) / (2.0 * self.half_extents)).max(-1)
        vals = x @ self.diff_normals.T / self.diff_offsets
        return np.maximum(vals.max(-1), 0.0)

    def in_difference_body(self, x: FloatArray) -> NDArray[np.bool_]:
        """Membership x in D with closed-set semantics and no gauge division."""
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            return (x ** 2).sum(-1) <= (2.0 * self.radius) ** 2
        if self.kind == "box":
            return (np.abs(x) <= 2.0 * self.half_extents).all(-1)
        return (x @ self.diff_normals.T <= self.diff_offsets).all(-1)

    def scale(self, factor: float) -> "ConvexSolid":
        if factor <= 0:
            raise ContractViolation("scale factor must be positive")
        if self.kind == "ball":
            return ConvexSolid("ball", self.dim, radius=self.radius * factor)
        if self.kind == "box":
            return ConvexSolid("box", self.dim, half_extents=self.half_extents * factor)
        return ConvexSolid("poly", 2, vertices=self.vertices * factor)

    def spec_string(self) -> str:
        if self.kind == "ball":
            return f"ball d={self.dim} r={self.radius!r}"
        if self.kind == "box":
            return "box d=%d h=%s" % (self.dim, ",".join(repr(float(h)) for h in self.half_extents))
        return "poly2 v=" + ";".join(f"{v[0]!r},{v[1]!r}" for v in self.vertices)


def ball(dim: int, radius: float) -> ConvexSolid:
    return ConvexSolid("ball", dim, radius=float(radius))


def box(half_extents) -> ConvexSolid:
    h = np.atleast_1d(np.asarray(half_extents, dtype=float))
    return ConvexSolid("box", len(h), half_extents=h)


def symmetric_polygon(vertices) -> ConvexSolid:
    """Centrally symmetric convex polygon, re-centered on its centroid."""
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2:
        raise ContractViolation("polygon vertices must be an (n, 2) array")
    v = _ensure_ccw(v)
    v = v - _polygon_centroid(v)
    scale = float(np.abs(v).max())
    neg = -v
    # every vertex must have its antipode among the vertices
    for p in v:
        if np.min(np.abs(neg - p).sum(axis=1)) > 1e-9 * max(scale, 1.0):
            raise ContractViolation("polygon is not centrally symmetric about its centroid")
    return ConvexSolid("poly", 2, vertices=v)


def parse_solid_spec(text: str) -> ConvexSolid:
    """Parse the solid grammar: ``ball d=<int> r=<float>``, ``box d=<int>
    h=<float,...>``, ``poly2 v=<x1,y1;...>``."""
    def bad(msg: str) -> ValidationError:
        return ValidationError(f"bad solid spec {text!r}: {msg}")

    parts = text.split()
    if not parts:
        raise bad("empty solid spec")
    head, kv = parts[0], {}
    for item in parts[1:]:
        if "=" not in item:
            raise bad(f"expected key=value, got {item!r}")
        k, val = item.split("=", 1)
        kv[k] = val
    try:
        if head == "ball":
            return ball(int(kv["d"]), float(kv["r"]))
        if head == "box":
            h = [float(t) for t in kv["h"].split(",")]
            if int(kv["d"]) != len(h):
                raise bad("box d= does not match number of half extents")
            return box(h)
        if head == "poly2":
            verts = [[float(t) for t in pair.split(",")] for pair in kv["v"].split(";")]
            return symmetric_polygon(verts)
    except KeyError as exc:
        raise bad(f"missing key {exc.args[0]!r}") from exc
    except ValidationError:
        raise
    except (ValueError, ContractViolation) as exc:
        raise bad(str(exc)) from exc
    raise bad(f"unknown shape {head!r} (expected ball, box or poly2)")


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box [lo, hi) used both as packing region and clip window."""

    lo: FloatArray
    hi: FloatArray

    def __post_init__(self) -> None:
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ContractViolation("box must satisfy lo < hi per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, side: float, dim: int, origin: float = 0.0) -> "Box":
        return cls(np.full(dim, origin), np.full(dim, origin + side))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def sides(self) -> FloatArray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def contains(self, points: FloatArray) -> NDArray[np.bool_]:
        p = np.asarray(points, dtype=float)
        return ((p >= self.lo) & (p < self.hi)).all(-1)

    def sample(self, rng: np.random.Generator, n: int) -> FloatArray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


@dataclass(frozen=True, eq=False)
class GaugeBall:
    """Ball in the gauge norm of a solid: {y : gauge(y - center) <= radius}."""

    center: FloatArray
    radius: float
    solid: ConvexSolid

    def contains(self, points: FloatArray) -> NDArray[np.bool_]:
        return self.solid.gauge(np.asarray(points, dtype=float) - self.center) <= self.radius

    @property
    def volume(self) -> float:
        return self.solid.diff_volume * self.radius ** self.solid.dim


def gauge_norm(x, solid: ConvexSolid) -> float:
    """Gauge norm of a single displacement vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (solid.dim,):
        raise ContractViolation(f"expected a vector of dimension {solid.dim}, got shape {x.shape}")
    return float(solid.gauge(x))


def overlaps(x, y, solid: ConvexSolid) -> bool:
    """Whether the translates x+S and y+S intersect (closed-set semantics)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (solid.dim,) or y.shape != (solid.dim,):
        raise ContractViolation("overlap test requires two vectors of the solid's dimension")
    return bool(solid.in_difference_body(x - y))


# ---------------------------------------------------------------------------
# clipped volumes


def _box_overlap_volume(lo1, hi1, lo2, hi2) -> float:
    w = np.minimum(hi1, hi2) - np.maximum(lo1, lo2)
    return float(np.prod(np.maximum(w, 0.0))) if np.all(w > 0) else 0.0


def _cells_vs_ball(lo, hi, center, r):
    """(fully inside, fully outside) masks of axis-aligned cells vs a ball."""
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    d = np.abs(mid - center)
    dmax2 = ((d + half) ** 2).sum(-1)
    dmin2 = (np.maximum(d - half, 0.0) ** 2).sum(-1)
    return dmax2 <= r * r, dmin2 > r * r


def _cells_vs_polygon(lo, hi, center, normals, offsets, bbox_half):
    """SAT classification of cells vs a convex polygon translated to center."""
    mid = 0.5 * (lo + hi) - center
    half = 0.5 * (hi - lo)
    proj = mid @ normals.T
    spread = half @ np.abs(normals).T
    inside = ((proj + spread) <= offsets).all(-1)
    sep_edges = ((proj - spread) > offsets).any(-1)
    sep_axes = (np.abs(mid) - half > bbox_half).any(-1)
    return inside, sep_edges | sep_axes


def clipped_volume(solid: ConvexSolid, center, clip: Box, tol: float = 1e-6) -> float:
    """Volume of (center + S) intersected with the clip box.

    Exact for box solids; balls and polygons use adaptive dyadic subdivision,
    classifying cells as fully inside / outside and splitting the rest until
    the unresolved mass falls below ``tol`` times the solid volume.
    """
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    center = np.asarray(center, dtype=float)
    clip_lo, clip_hi = clip.lo, clip.hi
    if solid.kind == "box":
        return _box_overlap_volume(center - solid.half_extents, center + solid.half_extents,
                                   clip_lo, clip_hi)

    # restrict to the solid's bounding box first
    if solid.kind == "ball":
        bb = np.full(solid.dim, solid.radius)
    else:
        bb = np.abs(solid.vertices).max(axis=0)
    lo = np.maximum(clip_lo, center - bb)
    hi = np.minimum(clip_hi, center + bb)
    if np.any(hi <= lo):
        return 0.0

    if solid.kind == "ball":
        classify = lambda L, H: _cells_vs_ball(L, H, center, solid.radius)
    else:
        normals, offsets = _halfplanes(solid.vertices)
        classify = lambda L, H: _cells_vs_polygon(L, H, center, normals, offsets, bb)

    los = lo[None, :]
    his = hi[None, :]
    inside_mass = 0.0
    target = tol * solid.volume
    d = solid.dim
    for _ in range(64):
        vol = np.prod(his - los, axis=1)
        full_in, full_out = classify(los, his)
        inside_mass += float(vol[full_in].sum())
        mixed = ~(full_in | full_out)
        mixed_mass = float(vol[mixed].sum())
        if mixed_mass < target or not mixed.any():
            return inside_mass + 0.5 * mixed_mass
        los, his = los[mixed], his[mixed]
        mids = 0.5 * (los + his)
        # split every mixed cell into 2^d children
        children_lo = [los]
        children_hi = [his]
        for ax in range(d):
            new_lo, new_hi = [], []
            for L, H in zip(children_lo, children_hi):
                Lc, Hc = L.copy(), H.copy()
                Hc[:, ax] = mids[:, ax]
                new_lo.append(Lc)
                new_hi.append(Hc)
                Lc2, Hc2 = L.copy(), H.copy()
                Lc2[:, ax] = mids[:, ax]
                new_lo.append(Lc2)
                new_hi.append(Hc2)
            children_lo, children_hi = new_lo, new_hi
        los = np.concatenate(children_lo)
        his = np.concatenate(children_hi)
    return inside_mass  # depth guard; unreachable at sane tolerances


def max_packing_bound(region_sides, solid: ConvexSolid) -> int:
    """Upper bound on how many non-overlapping translates fit with centers in the region.

    Half-gauge balls around centers are pairwise disjoint and live in the
    region fattened by the solid diameter, so the count is at most the
    fattened volume over the half-gauge-ball volume.
    """
    sides = np.atleast_1d(np.asarray(region_sides, dtype=float))
    fattened = float(np.prod(sides + solid.diameter))
    return int(math.floor(fattened / solid.half_gauge_ball_volume + 1e-9))
