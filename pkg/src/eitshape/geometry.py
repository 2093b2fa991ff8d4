"""Convex polygonal inclusions, admissibility constraints, and vertex motions.

Conventions used throughout the package:

* Inclusion polygons are stored clockwise (signed area < 0).  Inputs in either
  orientation are normalized at construction and the flip is recorded.
* Edge ``i`` runs from vertex ``i`` to vertex ``i + 1`` (mod N).  For a
  clockwise polygon the outward unit normal of an edge is its unit tangent
  rotated by +90 degrees.
* A velocity field assigns one displacement vector per vertex; moving the
  polygon means ``vertices + t * velocity``.  The displacement induced on a
  boundary point is the linear interpolation of the two endpoint velocities
  of the edge that carries it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "DomainSpec",
    "Polygon",
    "ConstraintParams",
    "VelocityField",
    "EdgeFrame",
    "AdmissibilityReport",
    "regular_polygon",
    "validate_constraints",
    "perturb",
    "edge_frame",
    "edge_frames",
    "interface_velocity",
    "symmetric_difference_area",
    "convex_intersection",
    "point_segment_distance",
]


class GeometryError(ValueError):
    """Degenerate or inadmissible geometric input."""


def _as_points(vertices) -> np.ndarray:
    pts = np.asarray(vertices, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError(f"expected an (N, 2) array of points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("points contain non-finite coordinates")
    return pts


def signed_area(pts: np.ndarray) -> float:
    """Shoelace signed area; negative for clockwise order."""
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the segment [a, b]. Broadcasts over points."""
    points = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    s = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    foot = a + s[:, None] * ab
    return np.linalg.norm(points - foot, axis=1)


@dataclass(frozen=True)
class DomainSpec:
    """Computational domain: a convex Lipschitz polygon with inclusion margin.

    ``kind`` is "unit_square" (the square [-1, 1]^2) or "regular_ngon"
    (``sides`` vertices on a circle of ``radius``, used as a polygonal stand-in
    for the disk).  ``margin`` is the required clearance between inclusion
    vertices and the domain boundary; ``diameter_bound`` defaults to the actual
    diameter.
    """

    kind: str = "unit_square"
    sides: int = 0
    radius: float = 1.0
    margin: float = 0.1
    diameter_bound: float | None = None

    def __post_init__(self):
        if self.kind not in ("unit_square", "regular_ngon"):
            raise GeometryError(f"unknown domain kind {self.kind!r}")
        if self.kind == "regular_ngon":
            if self.sides < 3:
                raise GeometryError("regular_ngon needs sides >= 3")
            if self.radius <= 0:
                raise GeometryError("regular_ngon needs radius > 0")
        L = self.diameter()
        if not 0 < self.margin < L / 2:
            raise GeometryError(
                f"margin must lie in (0, {L / 2:g}) for this domain, got {self.margin:g}"
            )

    def boundary_vertices(self) -> np.ndarray:
        """Domain polygon vertices in counterclockwise order."""
        if self.kind == "unit_square":
            return np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
        n = self.sides
        ang = 2.0 * np.pi * np.arange(n) / n
        return self.radius * np.column_stack([np.cos(ang), np.sin(ang)])

    def diameter(self) -> float:
        if self.diameter_bound is not None:
            if self.diameter_bound <= 0:
                raise GeometryError("diameter_bound must be positive")
            return self.diameter_bound
        pts = self.boundary_vertices()
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        return float(d.max())

    def perimeter(self) -> float:
        pts = self.boundary_vertices()
        return float(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1).sum())

    def area(self) -> float:
        return abs(signed_area(self.boundary_vertices()))

    def signed_boundary_distance(self, points) -> np.ndarray:
        """Distance to the domain boundary, positive inside, negative outside."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        pts = self.boundary_vertices()
        n = len(pts)
        dist = np.full(len(points), np.inf)
        inside = np.ones(len(points), dtype=bool)
        for i in range(n):
            a, b = pts[i], pts[(i + 1) % n]
            dist = np.minimum(dist, point_segment_distance(points, a, b))
            e = b - a
            # CCW domain: interior points sit on the left of each directed edge.
            cross = e[0] * (points[:, 1] - a[1]) - e[1] * (points[:, 0] - a[0])
            inside &= cross >= 0.0
        return np.where(inside, dist, -dist)

    def contains(self, points) -> np.ndarray:
        return self.signed_boundary_distance(points) >= 0.0


class Polygon:
    """Convex polygon, vertices normalized to clockwise order.

    Construction rejects degenerate input (fewer than 3 vertices, collinear
    consecutive vertices, zero area) and, for any vertex count, non-convex
    chains.  The first vertex keeps its position in the list when the input
    orientation is flipped, so edge indices stay meaningful to the caller.
    """

    __slots__ = ("vertices", "was_reoriented")

    def __init__(self, vertices):
        pts = _as_points(vertices)
        n = len(pts)
        if n < 3:
            raise GeometryError("polygon needs at least 3 vertices")
        scale = float(np.max(np.abs(pts))) or 1.0
        area2 = 2.0 * signed_area(pts)
        if abs(area2) < 1e-14 * scale * scale * n:
            raise GeometryError("degenerate polygon: vanishing area (collinear vertices)")
        reoriented = area2 > 0
        if reoriented:
            pts = np.vstack([pts[:1], pts[1:][::-1]])
        edges = np.roll(pts, -1, axis=0) - pts
        lengths = np.linalg.norm(edges, axis=1)
        if np.any(lengths < 1e-14 * scale):
            raise GeometryError("degenerate polygon: zero-length edge (repeated vertex)")
        cross = edges[:, 0] * np.roll(edges[:, 1], -1) - edges[:, 1] * np.roll(edges[:, 0], -1)
        # Clockwise strictly convex: every turn has negative cross product.
        if np.any(cross >= -1e-12 * lengths * np.roll(lengths, -1)):
            raise GeometryError("polygon is not strictly convex (collinear or reflex vertex)")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "vertices", pts)
        object.__setattr__(self, "was_reoriented", bool(reoriented))

    def __setattr__(self, name, value):
        raise AttributeError("Polygon is immutable")

    def __repr__(self):
        return f"Polygon({self.vertices.tolist()!r})"

    def __eq__(self, other):
        return isinstance(other, Polygon) and np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edge_vectors(self) -> np.ndarray:
        return np.roll(self.vertices, -1, axis=0) - self.vertices

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.edge_vectors(), axis=1)

    def perimeter(self) -> float:
        return float(self.edge_lengths().sum())

    def signed_area(self) -> float:
        return signed_area(self.vertices)

    def area(self) -> float:
        return abs(self.signed_area())

    def centroid(self) -> np.ndarray:
        pts = self.vertices
        nxt = np.roll(pts, -1, axis=0)
        w = pts[:, 0] * nxt[:, 1] - nxt[:, 0] * pts[:, 1]
        a6 = 3.0 * w.sum()
        return (pts + nxt).T @ w / a6

    def interior_angles(self) -> np.ndarray:
        pts = self.vertices
        prev = np.roll(pts, 1, axis=0) - pts
        nxt = np.roll(pts, -1, axis=0) - pts
        cosang = np.einsum("ij,ij->i", prev, nxt) / (
            np.linalg.norm(prev, axis=1) * np.linalg.norm(nxt, axis=1)
        )
        return np.arccos(np.clip(cosang, -1.0, 1.0))

    def contains_points(self, points, tol: float = 0.0) -> np.ndarray:
        """Vectorized membership test.  tol > 0 accepts a band around the boundary."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        pts = self.vertices
        edges = np.roll(pts, -1, axis=0) - pts
        lengths = np.linalg.norm(edges, axis=1)
        inside = np.ones(len(points), dtype=bool)
        for i in range(len(pts)):
            cross = edges[i, 0] * (points[:, 1] - pts[i, 1]) - edges[i, 1] * (
                points[:, 0] - pts[i, 0]
            )
            # Clockwise polygon: interior is the right side (negative cross).
            inside &= cross <= tol * lengths[i]
        return inside

    def boundary_distance(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        pts = self.vertices
        dist = np.full(len(points), np.inf)
        for i in range(len(pts)):
            a, b = pts[i], pts[(i + 1) % len(pts)]
            dist = np.minimum(dist, point_segment_distance(points, a, b))
        return dist

    def roll(self, start: int) -> "Polygon":
        """Same polygon with the vertex list rotated to begin at ``start``."""
        return Polygon(np.roll(self.vertices, -start, axis=0))

    def as_list(self) -> list:
        """Config-literal form: ordered list of [x, y] pairs."""
        return [[float(x), float(y)] for x, y in self.vertices]


def regular_polygon(sides: int, radius: float, center=(0.0, 0.0)) -> Polygon:
    """Regular polygon with ``sides`` vertices on a circle (stored clockwise)."""
    ang = 2.0 * np.pi * np.arange(sides) / sides
    c = np.asarray(center, dtype=float)
    return Polygon(c + radius * np.column_stack([np.cos(ang), np.sin(ang)]))


@dataclass(frozen=True)
class ConstraintParams:
    """Admissibility parameters: minimum vertex angle (radians), minimum
    pairwise vertex separation, and clearance from the domain boundary."""

    min_angle: float
    min_separation: float
    margin: float

    def __post_init__(self):
        if not 0 < self.min_angle < np.pi / 2:
            raise GeometryError("min_angle must lie in (0, pi/2)")
        if self.min_separation <= 0:
            raise GeometryError("min_separation must be positive")
        if self.margin <= 0:
            raise GeometryError("margin must be positive")


@dataclass(frozen=True)
class VelocityField:
    """One displacement 2-vector per polygon vertex."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise GeometryError(f"velocity field must be (N, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("velocity field has non-finite entries")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return len(self.vectors)

    def max_norm(self) -> float:
        return float(np.linalg.norm(self.vectors, axis=1).max())

    def stacked_norm(self) -> float:
        """Euclidean norm of the stacked 2N-vector."""
        return float(np.linalg.norm(self.vectors))

    def scaled(self, c: float) -> "VelocityField":
        return VelocityField(c * self.vectors)


@dataclass(frozen=True)
class EdgeFrame:
    """Per-edge orthonormal frame: clockwise unit tangent and outward normal."""

    index: int
    start: np.ndarray
    end: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    length: float

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.start + self.end)


def edge_frames(poly: Polygon):
    """Tangents, outward normals and lengths for all edges (vectorized)."""
    vec = poly.edge_vectors()
    lengths = np.linalg.norm(vec, axis=1)
    tangents = vec / lengths[:, None]
    normals = np.column_stack([-tangents[:, 1], tangents[:, 0]])
    return tangents, normals, lengths


def edge_frame(poly: Polygon, i: int) -> EdgeFrame:
    n = poly.n_vertices
    if not 0 <= i < n:
        raise GeometryError(f"edge index {i} out of range for {n}-gon")
    a = poly.vertices[i]
    b = poly.vertices[(i + 1) % n]
    vec = b - a
    length = float(np.linalg.norm(vec))
    if length == 0.0:
        raise GeometryError(f"zero-length edge {i}")
    tau = vec / length
    nrm = np.array([-tau[1], tau[0]])
    return EdgeFrame(index=i, start=a.copy(), end=b.copy(), tangent=tau, normal=nrm, length=length)


def perturb(poly: Polygon, velocity: VelocityField, t: float) -> Polygon:
    """Move every vertex by ``t`` times its velocity vector.

    The caller is responsible for keeping ``|t| < margin / (2 max_i |V_i|)``;
    the result is re-validated, so motions that break simplicity or convexity
    raise ``GeometryError`` naming the violated invariant.
    """
    if len(velocity) != poly.n_vertices:
        raise GeometryError(
            f"velocity has {len(velocity)} vectors for a {poly.n_vertices}-gon"
        )
    try:
        return Polygon(poly.vertices + t * velocity.vectors)
    except GeometryError as exc:
        raise GeometryError(f"perturbation with t={t:g} is inadmissible: {exc}") from exc


def interface_velocity(poly: Polygon, velocity: VelocityField, point, edge: int | None = None):
    """Displacement induced at a boundary point: the affine interpolation of
    the endpoint velocities along the owning edge.

    ``edge`` may be given when the caller already knows which edge carries the
    point; otherwise the closest edge is used.  Points farther than
    1e-12 times the edge length from the edge are rejected.
    """
    if len(velocity) != poly.n_vertices:
        raise GeometryError("velocity/polygon size mismatch")
    q = np.asarray(point, dtype=float)
    if q.shape != (2,):
        raise GeometryError("point must be a 2-vector")
    n = poly.n_vertices
    if edge is None:
        d = np.array(
            [
                point_segment_distance(q[None, :], poly.vertices[i], poly.vertices[(i + 1) % n])[0]
                for i in range(n)
            ]
        )
        edge = int(np.argmin(d))
    elif not 0 <= edge < n:
        raise GeometryError(f"edge index {edge} out of range")
    a = poly.vertices[edge]
    b = poly.vertices[(edge + 1) % n]
    ab = b - a
    ell2 = float(ab @ ab)
    dist = point_segment_distance(q[None, :], a, b)[0]
    if dist > 1e-12 * math.sqrt(ell2):
        raise GeometryError(
            f"point {q.tolist()} is off edge {edge} by {dist:.3e} (tolerance 1e-12 * edge length)"
        )
    s = float((q - a) @ ab / ell2)
    va = velocity.vectors[edge]
    vb = velocity.vectors[(edge + 1) % n]
    return va + s * (vb - va)


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class AdmissibilityReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> ConstraintCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def validate_constraints(
    poly: Polygon, params: ConstraintParams, dom: DomainSpec
) -> AdmissibilityReport:
    """Check the admissibility constraints and report a margin for each.

    Margins are "distance to failure": nonnegative means the constraint holds.
    """
    pts = poly.vertices
    n = len(pts)

    pair = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    pair[np.diag_indices(n)] = np.inf
    sep_margin = float(pair.min() - params.min_separation)
    checks = [
        ConstraintCheck(
            "vertex_separation",
            sep_margin >= 0,
            sep_margin,
            f"min pairwise distance {pair.min():.6g} vs required {params.min_separation:g}",
        )
    ]

    ang = poly.interior_angles()
    low = ang - params.min_angle
    high = (np.pi - params.min_angle) - ang
    ang_margin = float(min(low.min(), high.min()))
    checks.append(
        ConstraintCheck(
            "vertex_angles",
            ang_margin >= 0,
            ang_margin,
            f"angles in [{ang.min():.6g}, {ang.max():.6g}] rad, "
            f"required [{params.min_angle:g}, {np.pi - params.min_angle:.6g}]",
        )
    )

    sd = dom.signed_boundary_distance(pts)
    bd_margin = float(sd.min() - params.margin)
    checks.append(
        ConstraintCheck(
            "boundary_margin",
            bd_margin >= 0,
            bd_margin,
            f"min signed distance to domain boundary {sd.min():.6g} vs required {params.margin:g}",
        )
    )

    # Construction already guarantees strict convexity; recorded for the report.
    checks.append(ConstraintCheck("convex", True, 0.0, "enforced at construction"))
    return AdmissibilityReport(tuple(checks))


def convex_intersection(a: Polygon, b: Polygon) -> np.ndarray:
    """Vertices of the intersection of two convex polygons (may be empty).

    Sutherland-Hodgman clipping of ``a`` against the half-planes of ``b``.
    """
    subject = list(a.vertices)
    clip = b.vertices
    m = len(clip)
    for i in range(m):
        p, q = clip[i], clip[(i + 1) % m]
        e = q - p
        out = []
        if not subject:
            break
        prev = subject[-1]
        prev_in = e[0] * (prev[1] - p[1]) - e[1] * (prev[0] - p[0]) <= 0.0
        for cur in subject:
            cur_in = e[0] * (cur[1] - p[1]) - e[1] * (cur[0] - p[0]) <= 0.0
            if cur_in != prev_in:
                d = cur - prev
                denom = e[0] * d[1] - e[1] * d[0]
                t = (e[0] * (p[1] - prev[1]) - e[1] * (p[0] - prev[0])) / denom
                out.append(prev + t * d)
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
        subject = out
    return np.array(subject) if subject else np.empty((0, 2))


def symmetric_difference_area(a: Polygon, b: Polygon) -> float:
    """Area of the symmetric difference of two convex polygons."""
    inter = convex_intersection(a, b)
    inter_area = abs(signed_area(inter)) if len(inter) >= 3 else 0.0
    return max(a.area() + b.area() - 2.0 * inter_area, 0.0)
