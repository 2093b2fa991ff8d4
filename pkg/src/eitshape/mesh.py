"""Interface-conforming graded triangulations of a convex polygonal domain.

The generator is a batched conforming-Delaunay scheme: a deterministic point
set (domain boundary subdivision, inclusion-edge subdivision, multi-level hex
lattice) is retriangulated with scipy's Delaunay after every batch of point
insertions.  Inclusion edges are recovered purely by segment splitting — a
polygon edge is "present" when every one of its subsegments appears as a mesh
edge — so conformity is checked on node ids, never with geometric tolerances.
Splits next to polygon vertices and segment crossings land on dyadic shells,
which stops the mutual-encroachment cascade between constraint segments that
meet at small angles.

Triangle sizes follow a radial grading around inclusion vertices
(``size = max(h_min, h * (dist / radius) ** exponent)`` inside the grading
radius) so that the gradient blow-up at inclusion corners stays resolved.

When two inclusion polygons are given (needed to integrate quantities over
the symmetric difference of two nearby polygons exactly), both are recovered
in the same mesh; region labels refer to the FIRST polygon.  Triangles pinched
between nearly parallel or crossing edges of the two polygons cannot satisfy
the quality floor — those with all three nodes on constraint chains are exempt
from it, and only from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .geometry import (
    DomainSpec,
    GeometryError,
    Polygon,
    VelocityField,
    point_segment_distance,
)

__all__ = [
    "MeshError",
    "ConstraintRecoveryError",
    "MeshQualityError",
    "GradingSpec",
    "Mesh",
    "MeshQualityStats",
    "InterfaceRing",
    "generate_mesh",
    "mesh_quality",
    "interface_ring",
    "interface_motion_field",
    "apply_motion",
]

QUALITY_MIN_ANGLE_DEG = 20.0
# Element circumdiameters are kept within this factor of the size field.
SIZE_SLACK = 1.25


class MeshError(RuntimeError):
    """Mesh generation or validation failure."""


class ConstraintRecoveryError(MeshError):
    """A constraint edge could not be recovered as a union of mesh edges."""


class MeshQualityError(MeshError):
    """The quality floor could not be met."""


@dataclass(frozen=True)
class GradingSpec:
    """Target size ``h``, floor ``h_min`` (default ``h / 64``), grading
    exponent and grading radius around inclusion vertices."""

    h: float
    h_min: float | None = None
    exponent: float = 2.0
    radius: float = 0.2

    def __post_init__(self):
        if self.h <= 0:
            raise MeshError("h must be positive")
        hm = self.resolved_h_min
        if not 0 < hm <= self.h:
            raise MeshError("h_min must lie in (0, h]")
        if self.exponent < 1.0:
            raise MeshError("grading exponent must be >= 1")
        if self.radius <= 0:
            raise MeshError("grading radius must be positive")

    @property
    def resolved_h_min(self) -> float:
        return self.h / 64.0 if self.h_min is None else self.h_min

    def size_at(self, points: np.ndarray, graded_vertices: np.ndarray) -> np.ndarray:
        """Local target size: ``h`` away from inclusion vertices, graded down
        to ``h_min`` inside the grading radius."""
        points = np.atleast_2d(points)
        s = np.full(len(points), self.h)
        hm = self.resolved_h_min
        for v in graded_vertices:
            d = np.linalg.norm(points - v, axis=1)
            sv = np.where(
                d < self.radius,
                np.maximum(hm, self.h * (d / self.radius) ** self.exponent),
                self.h,
            )
            np.minimum(s, sv, out=s)
        return s


@dataclass(frozen=True)
class MeshQualityStats:
    min_angle_deg: float
    max_aspect: float
    h_eff: float
    n_nodes: int
    n_triangles: int
    n_boundary_edges: int
    n_interface_edges: int


class _Chain:
    """One constraint edge with its ordered subdivision.

    ``slot`` is -1 for the domain boundary, 0/1 for inclusion polygons.
    ``params`` are arclength fractions in [0, 1] along the edge a -> b;
    consecutive entries are the leaf subsegments that must appear as mesh
    edges.  ``features`` marks params whose node is a polygon vertex, domain
    corner or segment crossing: splits adjacent to those land on dyadic
    shells.
    """

    __slots__ = ("slot", "edge_index", "a", "b", "length", "params", "node_ids", "features")

    def __init__(self, slot, edge_index, a, b, id_a, id_b):
        self.slot = slot
        self.edge_index = edge_index
        self.a = a
        self.b = b
        self.length = float(np.linalg.norm(b - a))
        self.params = [0.0, 1.0]
        self.node_ids = [id_a, id_b]
        self.features = {0.0, 1.0}

    def point_at(self, s: float) -> np.ndarray:
        if s == 0.0:
            return self.a.copy()
        if s == 1.0:
            return self.b.copy()
        return self.a + s * (self.b - self.a)

    def insert(self, s: float, node_id: int, feature: bool = False):
        import bisect

        k = bisect.bisect_left(self.params, s)
        self.params.insert(k, s)
        self.node_ids.insert(k, node_id)
        if feature:
            self.features.add(s)

    def split_param(self, k: int) -> float:
        """Param at which to split subsegment k (between params k and k+1)."""
        s1, s2 = self.params[k], self.params[k + 1]
        u1, u2 = s1 * self.length, s2 * self.length
        length = u2 - u1
        f1 = s1 in self.features
        f2 = s2 in self.features
        if f1 != f2:
            # Largest power of two not exceeding half the length, measured
            # from the feature endpoint.
            d = math.ldexp(1.0, math.frexp(0.5 * length)[1] - 1)
            if not 0.25 * length <= d <= 0.75 * length:
                d = 0.5 * length
            u = u1 + d if f1 else u2 - d
            return u / self.length
        return 0.5 * (s1 + s2)


class _PointRegistry:
    def __init__(self):
        self.points: list = []
        self._lookup: dict = {}
        self.is_constraint: list = []

    def add(self, xy, constraint: bool) -> int:
        key = (float(xy[0]), float(xy[1]))
        idx = self._lookup.get(key)
        if idx is not None:
            if constraint:
                self.is_constraint[idx] = True
            return idx
        idx = len(self.points)
        self.points.append(key)
        self._lookup[key] = idx
        self.is_constraint.append(constraint)
        return idx

    def array(self) -> np.ndarray:
        return np.array(self.points, dtype=float)


def _segment_crossings(p: np.ndarray, r: np.ndarray, q: np.ndarray, s: np.ndarray):
    """Intersection params (t, u) of segments p+t*r, q+u*s, or None."""
    rxs = r[0] * s[1] - r[1] * s[0]
    scale = np.linalg.norm(r) * np.linalg.norm(s)
    if abs(rxs) < 1e-14 * scale:
        return None
    qp = q - p
    t = (qp[0] * s[1] - qp[1] * s[0]) / rxs
    u = (qp[0] * r[1] - qp[1] * r[0]) / rxs
    eps = 1e-12
    if eps < t < 1 - eps and -1e-9 < u < 1 + 1e-9:
        return t, u
    return None


def _triangle_metrics(arr: np.ndarray, simp: np.ndarray):
    """Vectorized areas, circumcenters/radii and min angles."""
    p0, p1, p2 = arr[simp[:, 0]], arr[simp[:, 1]], arr[simp[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * np.abs(area2)
    l0 = np.linalg.norm(p2 - p1, axis=1)
    l1 = np.linalg.norm(p0 - p2, axis=1)
    l2 = np.linalg.norm(p1 - p0, axis=1)
    lmin = np.minimum(np.minimum(l0, l1), l2)
    with np.errstate(divide="ignore", invalid="ignore"):
        circ_r = l0 * l1 * l2 / (4.0 * np.maximum(area, 1e-300))
        sin_min = np.clip(lmin / (2.0 * circ_r), -1.0, 1.0)
    min_angle = np.arcsin(sin_min)
    # Circumcenter from perpendicular-bisector solve.
    b1 = 0.5 * np.einsum("ij,ij->i", d1, p1 + p0)
    b2 = 0.5 * np.einsum("ij,ij->i", d2, p2 + p0)
    det = np.where(area2 == 0.0, 1e-300, area2)
    cx = (b1 * d2[:, 1] - b2 * d1[:, 1]) / det
    cy = (d1[:, 0] * b2 - d2[:, 0] * b1) / det
    centers = np.column_stack([cx, cy])
    return area, centers, circ_r, min_angle


def _edge_keys(i: np.ndarray, j: np.ndarray, n: int) -> np.ndarray:
    a = np.minimum(i, j).astype(np.int64)
    b = np.maximum(i, j).astype(np.int64)
    return a * np.int64(n) + b


class Mesh:
    """Immutable triangulation with region labels and constraint bookkeeping.

    ``triangles`` are CCW node triples; ``region`` is 1 inside the first
    inclusion polygon and 0 outside.  ``boundary_edges`` carry the index of the
    domain edge they lie on; ``interface_edges`` (first polygon only) carry the
    polygon edge index and the adjacent (inside, outside) triangle ids, with
    node order following the polygon's clockwise traversal.
    """

    def __init__(
        self,
        nodes: np.ndarray,
        triangles: np.ndarray,
        region: np.ndarray,
        boundary_edges: np.ndarray,
        boundary_marker: np.ndarray,
        interface_edges: np.ndarray,
        interface_edge_index: np.ndarray,
        interface_tri_in: np.ndarray,
        interface_tri_out: np.ndarray,
        constraint_edges: dict | None = None,
        grading: GradingSpec | None = None,
    ):
        nodes = np.ascontiguousarray(np.asarray(nodes, dtype=float))
        triangles = np.ascontiguousarray(np.asarray(triangles, dtype=np.int32))
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must be (n, 2)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError("triangles must be (m, 3)")
        if len(triangles) == 0:
            raise MeshError("empty mesh")
        if triangles.min() < 0 or triangles.max() >= len(nodes):
            raise MeshError("triangle node index out of range")
        p0 = nodes[triangles[:, 0]]
        d1 = nodes[triangles[:, 1]] - p0
        d2 = nodes[triangles[:, 2]] - p0
        area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        flip = area2 < 0
        if np.any(flip):
            triangles = triangles.copy()
            triangles[flip] = triangles[flip][:, [0, 2, 1]]
            area2 = np.abs(area2)
        if np.any(area2 <= 0.0):
            raise MeshError("degenerate (zero-area) triangle")
        for arr in (nodes, triangles):
            arr.setflags(write=False)
        self.nodes = nodes
        self.triangles = triangles
        self.region = np.ascontiguousarray(np.asarray(region, dtype=np.int8))
        self.boundary_edges = np.ascontiguousarray(np.asarray(boundary_edges, dtype=np.int32))
        self.boundary_marker = np.ascontiguousarray(np.asarray(boundary_marker, dtype=np.int32))
        self.interface_edges = np.ascontiguousarray(np.asarray(interface_edges, dtype=np.int32))
        self.interface_edge_index = np.ascontiguousarray(
            np.asarray(interface_edge_index, dtype=np.int32)
        )
        self.interface_tri_in = np.ascontiguousarray(np.asarray(interface_tri_in, dtype=np.int32))
        self.interface_tri_out = np.ascontiguousarray(
            np.asarray(interface_tri_out, dtype=np.int32)
        )
        if len(self.region) != len(triangles):
            raise MeshError("region labels must match triangle count")
        self._constraint_edges = constraint_edges or {}
        self.grading = grading
        self._areas = None
        self._boundary_loop = None
        self._centroid_tree = None
        self._centroids = None

    # -- basic derived quantities -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        if self._areas is None:
            p0 = self.nodes[self.triangles[:, 0]]
            d1 = self.nodes[self.triangles[:, 1]] - p0
            d2 = self.nodes[self.triangles[:, 2]] - p0
            self._areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        return self._areas

    def triangle_centroids(self) -> np.ndarray:
        if self._centroids is None:
            self._centroids = self.nodes[self.triangles].mean(axis=1)
        return self._centroids

    def constraint_edges(self, slot: int) -> np.ndarray:
        """(q, 2) node-id pairs of the recovered subsegments of one polygon
        (slot 0 or 1) or of the domain boundary (slot -1)."""
        return self._constraint_edges.get(slot, np.empty((0, 2), dtype=np.int32))

    def boundary_loop(self):
        """Ordered boundary node ids (CCW) and their arclength positions."""
        if self._boundary_loop is None:
            succ = {}
            for (a, b) in self.boundary_edges:
                succ[int(a)] = int(b)
            if len(succ) != len(self.boundary_edges):
                raise MeshError("boundary edges do not form a single loop")
            start = int(self.boundary_edges[0, 0])
            loop = [start]
            cur = succ[start]
            while cur != start:
                loop.append(cur)
                cur = succ.get(cur)
                if cur is None or len(loop) > len(succ):
                    raise MeshError("open or tangled boundary loop")
            ids = np.array(loop, dtype=np.int32)
            pts = self.nodes[ids]
            seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
            arclen = np.concatenate([[0.0], np.cumsum(seg[:-1])])
            self._boundary_loop = (ids, arclen, float(seg.sum()))
        return self._boundary_loop

    def boundary_weights(self) -> np.ndarray:
        """Lumped (trapezoid) boundary quadrature weights, in loop order."""
        ids, arclen, perimeter = self.boundary_loop()
        pts = self.nodes[ids]
        seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        return 0.5 * (seg + np.roll(seg, 1))

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Triangle index containing each point (barycentric test over
        nearest-centroid candidates).  Raises on failure."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self._centroid_tree is None:
            self._centroid_tree = cKDTree(self.triangle_centroids())
        out = np.full(len(points), -1, dtype=np.int64)
        pending = np.arange(len(points))
        tol = -1e-10
        for k in (8, 32, 128):
            if len(pending) == 0:
                break
            k_eff = min(k, self.n_triangles)
            _, cand = self._centroid_tree.query(points[pending], k=k_eff)
            cand = np.atleast_2d(cand)
            for col in range(cand.shape[1]):
                unresolved = out[pending] < 0
                if not np.any(unresolved):
                    break
                rows = pending[unresolved]
                tris = cand[unresolved, col]
                bary = self._barycentric(points[rows], tris)
                ok = bary.min(axis=1) >= tol
                out[rows[ok]] = tris[ok]
            pending = pending[out[pending] < 0]
        if len(pending):
            # Last resort: exhaustive scan for the stragglers.
            for idx in pending:
                bary_all = self._barycentric(
                    np.repeat(points[idx][None, :], self.n_triangles, axis=0),
                    np.arange(self.n_triangles),
                )
                hits = np.nonzero(bary_all.min(axis=1) >= tol)[0]
                if len(hits) == 0:
                    raise MeshError(f"point {points[idx].tolist()} not located in mesh")
                out[idx] = hits[0]
        return out

    def _barycentric(self, pts: np.ndarray, tris: np.ndarray) -> np.ndarray:
        t = self.triangles[tris]
        p0 = self.nodes[t[:, 0]]
        d1 = self.nodes[t[:, 1]] - p0
        d2 = self.nodes[t[:, 2]] - p0
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        rp = pts - p0
        w1 = (rp[:, 0] * d2[:, 1] - rp[:, 1] * d2[:, 0]) / det
        w2 = (d1[:, 0] * rp[:, 1] - d1[:, 1] * rp[:, 0]) / det
        return np.column_stack([1.0 - w1 - w2, w1, w2])

    # -- text format ---------------------------------------------------------------

    def save_text(self, path):
        """Sectioned text format; floats at 17 significant digits."""
        lines = [f"NODES {self.n_nodes}"]
        for i, (x, y) in enumerate(self.nodes):
            lines.append(f"{i} {x:.17g} {y:.17g}")
        lines.append(f"TRIANGLES {self.n_triangles}")
        names = {0: "outside", 1: "inside"}
        for i, ((a, b, c), r) in enumerate(zip(self.triangles, self.region)):
            lines.append(f"{i} {a} {b} {c} {names[int(r)]}")
        lines.append(f"BOUNDARY_EDGES {len(self.boundary_edges)}")
        for (a, b), m in zip(self.boundary_edges, self.boundary_marker):
            lines.append(f"{a} {b} {m}")
        lines.append(f"INTERFACE_EDGES {len(self.interface_edges)}")
        for (a, b), e, ti, to in zip(
            self.interface_edges,
            self.interface_edge_index,
            self.interface_tri_in,
            self.interface_tri_out,
        ):
            lines.append(f"{a} {b} {e} {ti} {to}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_text(cls, path) -> "Mesh":
        with open(path) as fh:
            tokens = fh.read().split("\n")
        pos = 0

        def expect(section):
            nonlocal pos
            name, count = tokens[pos].split()
            if name != section:
                raise MeshError(f"expected section {section}, found {name}")
            pos += 1
            return int(count)

        n = expect("NODES")
        nodes = np.empty((n, 2))
        for i in range(n):
            parts = tokens[pos].split()
            nodes[int(parts[0])] = (float(parts[1]), float(parts[2]))
            pos += 1
        m = expect("TRIANGLES")
        tris = np.empty((m, 3), dtype=np.int32)
        region = np.empty(m, dtype=np.int8)
        rmap = {"inside": 1, "outside": 0, "1": 1, "0": 0}
        for i in range(m):
            parts = tokens[pos].split()
            tris[int(parts[0])] = [int(parts[1]), int(parts[2]), int(parts[3])]
            region[int(parts[0])] = rmap[parts[4]]
            pos += 1
        b = expect("BOUNDARY_EDGES")
        bedges = np.empty((b, 2), dtype=np.int32)
        bmark = np.empty(b, dtype=np.int32)
        for i in range(b):
            parts = tokens[pos].split()
            bedges[i] = [int(parts[0]), int(parts[1])]
            bmark[i] = int(parts[2])
            pos += 1
        q = expect("INTERFACE_EDGES")
        iedges = np.empty((q, 2), dtype=np.int32)
        iidx = np.empty(q, dtype=np.int32)
        itin = np.empty(q, dtype=np.int32)
        itout = np.empty(q, dtype=np.int32)
        for i in range(q):
            parts = tokens[pos].split()
            iedges[i] = [int(parts[0]), int(parts[1])]
            iidx[i], itin[i], itout[i] = int(parts[2]), int(parts[3]), int(parts[4])
            pos += 1
        return cls(nodes, tris, region, bedges, bmark, iedges, iidx, itin, itout)


def mesh_quality(mesh: Mesh) -> MeshQualityStats:
    """Min angle, max aspect (circumdiameter / shortest edge), h_eff and counts."""
    area, _, circ_r, min_angle = _triangle_metrics(mesh.nodes, mesh.triangles)
    p = mesh.nodes
    t = mesh.triangles
    l0 = np.linalg.norm(p[t[:, 2]] - p[t[:, 1]], axis=1)
    l1 = np.linalg.norm(p[t[:, 0]] - p[t[:, 2]], axis=1)
    l2 = np.linalg.norm(p[t[:, 1]] - p[t[:, 0]], axis=1)
    lmin = np.minimum(np.minimum(l0, l1), l2)
    return MeshQualityStats(
        min_angle_deg=float(np.degrees(min_angle.min())),
        max_aspect=float((2.0 * circ_r / lmin).max()),
        h_eff=float((2.0 * circ_r).max()),
        n_nodes=mesh.n_nodes,
        n_triangles=mesh.n_triangles,
        n_boundary_edges=len(mesh.boundary_edges),
        n_interface_edges=len(mesh.interface_edges),
    )


# -- generator -------------------------------------------------------------------


def _subdivide_chain(chain: _Chain, target_fn, registry: _PointRegistry, floor: float):
    """Split chain subsegments until each is no longer than its local target."""
    k = 0
    while k < len(chain.params) - 1:
        s1, s2 = chain.params[k], chain.params[k + 1]
        length = (s2 - s1) * chain.length
        mid = chain.point_at(0.5 * (s1 + s2))
        target = max(float(target_fn(mid[None, :])[0]), floor)
        if length > target:
            s = chain.split_param(k)
            node = registry.add(chain.point_at(s), constraint=True)
            chain.insert(s, node)
        else:
            k += 1


def _hex_levels(bbox_lo, bbox_hi, h: float, h_min: float, shift):
    """Hex lattices at halving spacings; caller filters each level to the band
    where its spacing matches the local size field."""
    levels = []
    a = 0.78 * h
    guard = 0
    while True:
        x0 = bbox_lo[0] - a * (0.513 + shift[0])
        y0 = bbox_lo[1] - a * (0.4937 + shift[1])
        ny = int(np.ceil((bbox_hi[1] - y0) / (a * np.sqrt(3) / 2))) + 2
        nx = int(np.ceil((bbox_hi[0] - x0) / a)) + 2
        j = np.arange(ny)
        i = np.arange(nx)
        X = x0 + i[None, :] * a + (j[:, None] % 2) * (a / 2)
        Y = y0 + j[:, None] * (a * np.sqrt(3) / 2) + 0.0 * i[None, :]
        levels.append((a, np.column_stack([X.ravel(), Y.ravel()])))
        if a <= 1.05 * h_min or guard > 28:
            break
        a *= 0.5
        guard += 1
    return levels


def generate_mesh(
    dom: DomainSpec,
    polys: Polygon | Sequence[Polygon] | None,
    grading: GradingSpec,
    *,
    quality_min_angle: float = QUALITY_MIN_ANGLE_DEG,
    _max_passes: int = 200,
    _lattice_shift: tuple = (0.0, 0.0),
) -> Mesh:
    """Triangulate the domain, conforming to one or two inclusion polygons.

    Region labels are assigned against the first polygon; the second (when
    present) is recovered geometrically only.  Element circumdiameters follow
    the grading size field up to the factor ``SIZE_SLACK`` and the quality
    floor applies to every triangle, except at the floor scale (circumdiameter
    below ``3 h_min``) where floor-length constraint subsegments can pin the
    local triangulation.  Raises ``ConstraintRecoveryError`` if an
    inclusion edge cannot be recovered and ``MeshQualityError`` if the quality
    floor cannot be met.
    """
    if polys is None:
        polys = []
    elif isinstance(polys, Polygon):
        polys = [polys]
    else:
        polys = list(polys)
    if len(polys) > 2:
        raise MeshError("at most two constraint polygons are supported")
    if len(polys) == 2 and np.array_equal(polys[0].vertices, polys[1].vertices):
        raise MeshError("the two constraint polygons must differ")
    for p in polys:
        sd = dom.signed_boundary_distance(p.vertices)
        if sd.min() < dom.margin * (1.0 - 1e-9):
            raise MeshError(
                f"polygon vertex at distance {sd.min():.6g} from the domain boundary, "
                f"required margin {dom.margin:g}"
            )

    h_min = grading.resolved_h_min
    graded_vertices = (
        np.vstack([p.vertices for p in polys]) if polys else np.empty((0, 2))
    )

    if len(polys) == 2:
        # Two constraint polygons: grade the size field into the strip between
        # them (on the strip centerline the distance sum equals the gap), so
        # chain subdivision, lattice fill and refinement shrink together and
        # the transition out of the strip stays gradual.
        def size_fn(pts):
            pts = np.atleast_2d(pts)
            s = grading.size_at(pts, graded_vertices)
            gap = polys[0].boundary_distance(pts) + polys[1].boundary_distance(pts)
            return np.minimum(s, np.maximum(0.45 * h_min, 0.8 * gap))

    else:

        def size_fn(pts):
            return grading.size_at(pts, graded_vertices)

    registry = _PointRegistry()
    dom_pts = dom.boundary_vertices()
    n_dom = len(dom_pts)

    chains: list[_Chain] = []
    for i in range(n_dom):
        a, b = dom_pts[i], dom_pts[(i + 1) % n_dom]
        chains.append(
            _Chain(-1, i, a, b, registry.add(a, True), registry.add(b, True))
        )
    for slot, poly in enumerate(polys):
        n = poly.n_vertices
        for i in range(n):
            a, b = poly.vertices[i], poly.vertices[(i + 1) % n]
            chains.append(
                _Chain(slot, i, a, b, registry.add(a, True), registry.add(b, True))
            )

    # Crossings between the two polygons become shared breakpoints.
    if len(polys) == 2:
        p0, p1 = polys
        for c in chains:
            if c.slot != 0:
                continue
            r = c.b - c.a
            for j in range(p1.n_vertices):
                q = p1.vertices[j]
                s = p1.vertices[(j + 1) % p1.n_vertices] - q
                rxs = r[0] * s[1] - r[1] * s[0]
                if abs(rxs) < 1e-12 * np.linalg.norm(r) * np.linalg.norm(s):
                    # Parallel edges: collinear overlap is unrecoverable.
                    qp = q - c.a
                    off = abs(qp[0] * r[1] - qp[1] * r[0]) / np.linalg.norm(r)
                    t0 = (qp @ r) / (r @ r)
                    t1 = t0 + (s @ r) / (r @ r)
                    lo_t, hi_t = min(t0, t1), max(t0, t1)
                    if off < 1e-10 and hi_t > 1e-9 and lo_t < 1 - 1e-9:
                        raise ConstraintRecoveryError(
                            f"polygon edges are collinear and overlap (slot 0 edge "
                            f"{c.edge_index}, slot 1 edge {j}): cannot recover both"
                        )
                    continue
                hit = _segment_crossings(c.a, r, q, s)
                if hit is None:
                    continue
                t, u = hit
                if u < 1e-9:
                    point = q.copy()
                elif u > 1 - 1e-9:
                    point = p1.vertices[(j + 1) % p1.n_vertices].copy()
                else:
                    point = c.a + t * r
                node = registry.add(point, True)
                c.insert(t, node, feature=True)
                if 1e-9 <= u <= 1 - 1e-9:
                    other = next(
                        ch for ch in chains if ch.slot == 1 and ch.edge_index == j
                    )
                    other.insert(u, node, feature=True)

    for chain in chains:
        _subdivide_chain(chain, size_fn, registry, 0.45 * h_min)

    # Interior fill: multi-level hex lattice, each level restricted to the band
    # where its spacing matches the size field, kept clear of constraints.
    seg_ends = []
    for chain in chains:
        seg_ends.append((chain.a, chain.b))
    lo = dom_pts.min(axis=0)
    hi = dom_pts.max(axis=0)
    lattice_added: list = []
    for lvl, (a_lvl, cand) in enumerate(_hex_levels(lo, hi, grading.h, h_min, _lattice_shift)):
        if len(cand) == 0:
            continue
        sz = size_fn(cand)
        if lvl == 0:
            band = sz >= 0.95 * a_lvl
        else:
            band = (sz >= 0.95 * a_lvl) & (sz < 1.9 * a_lvl)
        cand = cand[band]
        if len(cand) == 0:
            continue
        sz = sz[band]
        sd = dom.signed_boundary_distance(cand)
        keep = sd >= 0.55 * sz
        cand, sz = cand[keep], sz[keep]
        for (a, b) in seg_ends:
            if len(cand) == 0:
                break
            d = point_segment_distance(cand, a, b)
            keep = d >= 0.6 * sz
            cand, sz = cand[keep], sz[keep]
        # Coarser levels have independent row phases: keep clear of them.
        if len(cand) and lattice_added:
            tree = cKDTree(np.array(lattice_added))
            d, _ = tree.query(cand)
            cand = cand[d >= 0.62 * a_lvl]
        for p in cand:
            registry.add(p, False)
            lattice_added.append((float(p[0]), float(p[1])))

    quality_rad = np.radians(quality_min_angle)
    tri = None
    arr = None
    node_cap = max(300_000, 40 * len(registry.points))
    for _pass in range(max(_max_passes, 1)):
        if len(registry.points) > node_cap:
            raise ConstraintRecoveryError(
                f"constraint recovery is diverging ({len(registry.points)} nodes); "
                "check for nearly collinear overlapping constraint edges"
            )
        arr = registry.array()
        tri = Delaunay(arr)
        n_pts = len(arr)
        simp = tri.simplices
        keys = np.concatenate(
            [
                _edge_keys(simp[:, 0], simp[:, 1], n_pts),
                _edge_keys(simp[:, 1], simp[:, 2], n_pts),
                _edge_keys(simp[:, 2], simp[:, 0], n_pts),
            ]
        )
        keys = np.unique(keys)

        missing = []
        for chain in chains:
            ids = np.array(chain.node_ids, dtype=np.int64)
            pk = _edge_keys(ids[:-1], ids[1:], n_pts)
            absent = ~np.isin(pk, keys, assume_unique=False)
            for k in np.nonzero(absent)[0]:
                missing.append((chain, int(k)))
        if missing:
            # Split missing subsegments (descending index keeps positions valid).
            by_chain: dict = {}
            for chain, k in missing:
                by_chain.setdefault(id(chain), (chain, []))[1].append(k)
            for chain, ks in by_chain.values():
                for k in sorted(ks, reverse=True):
                    s1, s2 = chain.params[k], chain.params[k + 1]
                    if s2 - s1 < 1e-9:
                        raise ConstraintRecoveryError(
                            f"cannot recover constraint (slot {chain.slot}, edge "
                            f"{chain.edge_index}): splitting degenerated near "
                            f"param {s1:.6g}"
                        )
                    s = chain.split_param(k)
                    node = registry.add(chain.point_at(s), constraint=True)
                    chain.insert(s, node)
            continue

        area, centers, circ_r, min_angle = _triangle_metrics(arr, simp)
        centroids = arr[simp].mean(axis=1)
        sz_c = size_fn(centroids)
        is_con = np.array(registry.is_constraint, dtype=bool)
        exempt = is_con[simp].all(axis=1)
        oversize = (2.0 * circ_r > SIZE_SLACK * sz_c) & (2.0 * circ_r > 3.0 * h_min)
        bad = oversize | ((min_angle < quality_rad) & ~exempt)
        if not np.any(bad):
            break

        bad_idx = np.nonzero(bad)[0]
        cand = centers[bad_idx]
        cand_r = circ_r[bad_idx]
        inside = dom.signed_boundary_distance(cand) > 0.0

        # Encroachment: a candidate inside some subsegment's diametral circle
        # becomes a split of that subsegment instead of an insertion.
        seg_mid = []
        seg_rad = []
        seg_ref = []
        for chain in chains:
            ids = chain.node_ids
            for k in range(len(ids) - 1):
                pa = chain.point_at(chain.params[k])
                pb = chain.point_at(chain.params[k + 1])
                seg_mid.append(0.5 * (pa + pb))
                seg_rad.append(0.5 * np.linalg.norm(pb - pa))
                seg_ref.append((chain, k))
        seg_mid = np.array(seg_mid)
        seg_rad = np.array(seg_rad)
        seg_tree = cKDTree(seg_mid)

        splits: dict = {}
        free_cand = []
        free_rad = []
        max_rad = float(seg_rad.max())
        for c, r_c, ok_inside in zip(cand, cand_r, inside):
            enc = [
                e
                for e in seg_tree.query_ball_point(c, max_rad)
                if np.linalg.norm(seg_mid[e] - c) < seg_rad[e] * (1.0 - 1e-12)
            ]
            if enc or not ok_inside:
                if not ok_inside and not enc:
                    # Outside the domain without encroaching: split the nearest
                    # boundary subsegment to pull refinement toward it.
                    d = np.linalg.norm(seg_mid - c, axis=1)
                    enc = [int(np.argmin(d / np.maximum(seg_rad, 1e-300)))]
                for e in enc:
                    chain, k = seg_ref[int(e)]
                    if (chain.params[k + 1] - chain.params[k]) * chain.length >= 0.9 * h_min:
                        splits[(id(chain), chain.params[k])] = (chain, chain.params[k])
                continue
            free_cand.append(c)
            free_rad.append(r_c)

        changed = False
        n_new = 0
        cap = len(splits) + len(free_cand)
        new_pts = np.empty((cap, 2))
        new_rad = np.empty(cap)
        for chain, s1 in splits.values():
            k = chain.params.index(s1)
            s = chain.split_param(k)
            p = chain.point_at(s)
            node = registry.add(p, constraint=True)
            chain.insert(s, node)
            sub_len = (chain.params[k + 1] - chain.params[k]) * chain.length
            new_pts[n_new] = p
            new_rad[n_new] = 0.5 * sub_len
            n_new += 1
            changed = True

        if free_cand:
            # A circumcenter keeps its circumradius clear of existing nodes by
            # the empty-disk property; only the batch needs mutual spacing,
            # biggest circumradius first.
            order = sorted(range(len(free_cand)), key=lambda i: (-free_rad[i], i))
            for i in order:
                c, r_c = free_cand[i], free_rad[i]
                if n_new:
                    d = np.linalg.norm(new_pts[:n_new] - c, axis=1)
                    if np.any(d < 0.9 * np.minimum(r_c, new_rad[:n_new])):
                        continue
                registry.add(c, False)
                new_pts[n_new] = c
                new_rad[n_new] = r_c
                n_new += 1
                changed = True
        if not changed:
            break

    # -- final validation and assembly -------------------------------------------
    arr = registry.array()
    tri = Delaunay(arr)
    n_pts = len(arr)
    simp = np.asarray(tri.simplices, dtype=np.int32)
    keys = np.concatenate(
        [
            _edge_keys(simp[:, 0], simp[:, 1], n_pts),
            _edge_keys(simp[:, 1], simp[:, 2], n_pts),
            _edge_keys(simp[:, 2], simp[:, 0], n_pts),
        ]
    )
    keys_sorted = np.unique(keys)
    for chain in chains:
        ids = np.array(chain.node_ids, dtype=np.int64)
        pk = _edge_keys(ids[:-1], ids[1:], n_pts)
        bad = ~np.isin(pk, keys_sorted)
        if np.any(bad):
            raise ConstraintRecoveryError(
                f"failed to recover constraint (slot {chain.slot}, edge {chain.edge_index})"
            )

    area, centers, circ_r, min_angle = _triangle_metrics(arr, simp)
    is_con = np.array(registry.is_constraint, dtype=bool)
    exempt = is_con[simp].all(axis=1) | (2.0 * circ_r <= 3.0 * h_min)
    viol = (min_angle < quality_rad - 1e-12) & ~exempt
    if np.any(viol):
        worst = float(np.degrees(min_angle[viol].min()))
        raise MeshQualityError(
            f"{int(viol.sum())} triangles below the {quality_min_angle:g} degree "
            f"floor (worst {worst:.3g} degrees)"
        )
    # Triangles at the floor scale may be pinned by floor-length constraint
    # subsegments whose diametral circles block the circumcenter; they never
    # exceed the grading intent materially and are tolerated.
    centroids_chk = arr[simp].mean(axis=1)
    oversize = (2.0 * circ_r > SIZE_SLACK * size_fn(centroids_chk) * (1.0 + 1e-9)) & (
        2.0 * circ_r > 3.0 * h_min
    )
    if np.any(oversize):
        raise MeshQualityError(
            f"{int(oversize.sum())} triangles exceed the size field after "
            f"{_max_passes} passes"
        )

    # Region labels against the first polygon.
    centroids = arr[simp].mean(axis=1)
    if polys:
        region = polys[0].contains_points(centroids).astype(np.int8)
    else:
        region = np.zeros(len(simp), dtype=np.int8)

    # Edge -> adjacent triangles map for constraint edges.
    all_keys = np.concatenate(
        [
            _edge_keys(simp[:, 0], simp[:, 1], n_pts),
            _edge_keys(simp[:, 1], simp[:, 2], n_pts),
            _edge_keys(simp[:, 2], simp[:, 0], n_pts),
        ]
    )
    tri_of_key = np.tile(np.arange(len(simp), dtype=np.int64), 3)
    sort_idx = np.argsort(all_keys, kind="stable")
    sorted_keys = all_keys[sort_idx]
    sorted_tris = tri_of_key[sort_idx]

    def adjacent_triangles(ka):
        left = np.searchsorted(sorted_keys, ka, side="left")
        right = np.searchsorted(sorted_keys, ka, side="right")
        out = []
        for lo_i, hi_i in zip(left, right):
            out.append(sorted_tris[lo_i:hi_i])
        return out

    boundary_edges = []
    boundary_marker = []
    constraint_edges: dict = {}
    iface_edges = []
    iface_idx = []
    iface_in = []
    iface_out = []
    for chain in chains:
        ids = np.array(chain.node_ids, dtype=np.int64)
        pairs = np.column_stack([ids[:-1], ids[1:]])
        lst = constraint_edges.setdefault(chain.slot, [])
        lst.append(pairs)
        ka = _edge_keys(pairs[:, 0], pairs[:, 1], n_pts)
        adj = adjacent_triangles(ka)
        if chain.slot == -1:
            for (a, b), ts in zip(pairs, adj):
                if len(ts) != 1:
                    raise MeshError("domain boundary subsegment is not a hull edge")
                boundary_edges.append((a, b))
                boundary_marker.append(chain.edge_index)
        elif chain.slot == 0:
            for (a, b), ts in zip(pairs, adj):
                if len(ts) != 2:
                    raise MeshError("interface subsegment lacks two adjacent triangles")
                r0, r1 = int(region[ts[0]]), int(region[ts[1]])
                if r0 == r1:
                    raise MeshError(
                        "interface edge with same-region neighbors: conformity broken"
                    )
                t_in, t_out = (ts[0], ts[1]) if r0 == 1 else (ts[1], ts[0])
                iface_edges.append((a, b))
                iface_idx.append(chain.edge_index)
                iface_in.append(t_in)
                iface_out.append(t_out)

    constraint_edges = {
        slot: np.vstack(parts).astype(np.int32) for slot, parts in constraint_edges.items()
    }

    total_area = float(area.sum())
    if abs(total_area - dom.area()) > 1e-10 * dom.area():
        raise MeshError(f"triangle areas sum to {total_area!r}, expected {dom.area()!r}")
    if polys:
        inside_area = float(area[region == 1].sum())
        if abs(inside_area - polys[0].area()) > 1e-9 * max(polys[0].area(), 1.0):
            raise MeshError(
                f"inside-region area {inside_area!r} does not match polygon area "
                f"{polys[0].area()!r}"
            )

    return Mesh(
        nodes=arr,
        triangles=simp,
        region=region,
        boundary_edges=np.array(boundary_edges, dtype=np.int32),
        boundary_marker=np.array(boundary_marker, dtype=np.int32),
        interface_edges=np.array(iface_edges, dtype=np.int32).reshape(-1, 2),
        interface_edge_index=np.array(iface_idx, dtype=np.int32),
        interface_tri_in=np.array(iface_in, dtype=np.int32),
        interface_tri_out=np.array(iface_out, dtype=np.int32),
        constraint_edges=constraint_edges,
        grading=grading,
    )


# -- interface ring ----------------------------------------------------------------


@dataclass(frozen=True)
class InterfaceRing:
    """Interface edges ordered clockwise along the polygon boundary.

    ``nodes_a -> nodes_b`` follows the polygon traversal; ``s_mid`` is the
    midpoint's arclength fraction along its polygon edge; ``tri_in`` /
    ``tri_out`` are the adjacent triangles on either side.
    """

    mesh: Mesh
    poly: Polygon
    nodes_a: np.ndarray
    nodes_b: np.ndarray
    edge_index: np.ndarray
    lengths: np.ndarray
    midpoints: np.ndarray
    s_mid: np.ndarray
    tri_in: np.ndarray
    tri_out: np.ndarray

    def __len__(self):
        return len(self.nodes_a)

    def total_length(self) -> float:
        return float(self.lengths.sum())

    def interface_node_params(self):
        """Unique interface node ids with (owning edge, arclength fraction)."""
        ids = np.concatenate([self.nodes_a, self.nodes_b])
        edges = np.concatenate([self.edge_index, self.edge_index])
        uniq, first = np.unique(ids, return_index=True)
        own = edges[first]
        pts = self.mesh.nodes[uniq]
        verts = self.poly.vertices
        nvert = len(verts)
        a = verts[own]
        b = verts[(own + 1) % nvert]
        ab = b - a
        s = np.einsum("ij,ij->i", pts - a, ab) / np.einsum("ij,ij->i", ab, ab)
        return uniq, own, np.clip(s, 0.0, 1.0)


def interface_ring(mesh: Mesh, poly: Polygon) -> InterfaceRing:
    """Validate conformity to ``poly`` and return its ordered interface ring."""
    if len(mesh.interface_edges) == 0:
        raise MeshError("mesh has no interface edges")
    a = mesh.nodes[mesh.interface_edges[:, 0]]
    b = mesh.nodes[mesh.interface_edges[:, 1]]
    mid = 0.5 * (a + b)
    lengths = np.linalg.norm(b - a, axis=1)
    verts = poly.vertices
    n = len(verts)
    idx = mesh.interface_edge_index
    if idx.max() >= n:
        raise MeshError("interface edge index out of range for this polygon")
    pa = verts[idx]
    pb = verts[(idx + 1) % n]
    ab = pb - pa
    elen = np.linalg.norm(ab, axis=1)
    # Midpoints must sit on their assigned polygon edge.
    s = np.einsum("ij,ij->i", mid - pa, ab) / (elen**2)
    foot = pa + s[:, None] * ab
    off = np.linalg.norm(mid - foot, axis=1)
    if np.any(off > 1e-10 * elen):
        raise MeshError("interface edges do not lie on the polygon (mesh/poly mismatch)")
    order = np.lexsort((s, idx))
    na = mesh.interface_edges[order, 0].copy()
    nb = mesh.interface_edges[order, 1].copy()
    # Orient each edge along the traversal direction.
    d = np.einsum("ij,ij->i", mesh.nodes[nb] - mesh.nodes[na], ab[order])
    swap = d < 0
    na[swap], nb[swap] = nb[swap].copy(), na[swap].copy()
    # Closure: consecutive edges share nodes, total length matches perimeter.
    if not np.all(nb == np.roll(na, -1)):
        raise MeshError("interface edges do not close into a ring")
    if abs(lengths.sum() - poly.perimeter()) > 1e-10 * poly.perimeter():
        raise MeshError("interface ring length does not match polygon perimeter")
    return InterfaceRing(
        mesh=mesh,
        poly=poly,
        nodes_a=na,
        nodes_b=nb,
        edge_index=idx[order].copy(),
        lengths=lengths[order],
        midpoints=mid[order],
        s_mid=np.clip(s[order], 0.0, 1.0),
        tri_in=mesh.interface_tri_in[order].copy(),
        tri_out=mesh.interface_tri_out[order].copy(),
    )


# -- mesh motion -------------------------------------------------------------------


def _wachspress_weights(poly_ccw: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Wachspress coordinates of strictly interior points of a convex polygon."""

    def tri_area(a, b, c):
        return 0.5 * ((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                      - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))

    n = len(poly_ccw)
    w = np.empty((len(pts), n))
    for i in range(n):
        pm, pi, pp = poly_ccw[i - 1], poly_ccw[i], poly_ccw[(i + 1) % n]
        c = tri_area(pm[None, :], pi[None, :], pp[None, :])[0]
        a_prev = tri_area(pm[None, :], pi[None, :], pts)
        a_next = tri_area(pi[None, :], pp[None, :], pts)
        w[:, i] = c / (a_prev * a_next)
    return w / w.sum(axis=1, keepdims=True)


def interface_motion_field(
    mesh: Mesh, poly: Polygon, velocity: VelocityField, decay: float | None = None
) -> np.ndarray:
    """Node displacement field matching a vertex velocity of the inclusion.

    Interface nodes move with the edge-affine interface velocity, interior
    nodes with the Wachspress blend of the vertex velocities (affine for a
    triangle), and exterior nodes move with the interface velocity of their
    closest boundary point, faded out linearly over ``decay`` (by default 90%
    of the clearance between the polygon and the domain boundary, which pins
    the domain boundary).  The field's gradient is bounded independently of
    the mesh, so graded elements at polygon vertices survive the motion.
    Applying the field scaled by t yields a mesh exactly conforming to the
    moved polygon.
    """
    if len(velocity) != poly.n_vertices:
        raise GeometryError("velocity/polygon size mismatch")
    ring = interface_ring(mesh, poly)
    theta = np.zeros_like(mesh.nodes)
    V = velocity.vectors
    n = poly.n_vertices

    iface_ids, own_edge, s = ring.interface_node_params()
    va = V[own_edge]
    vb = V[(own_edge + 1) % n]
    theta[iface_ids] = va + s[:, None] * (vb - va)
    # Nodes at polygon vertices take the vertex velocity exactly.
    for j, vtx in enumerate(poly.vertices):
        d = np.linalg.norm(mesh.nodes[iface_ids] - vtx, axis=1)
        kk = int(np.argmin(d))
        if d[kk] < 1e-9:
            theta[iface_ids[kk]] = V[j]

    iface_mask = np.zeros(mesh.n_nodes, dtype=bool)
    iface_mask[iface_ids] = True
    inside_nodes = np.unique(mesh.triangles[mesh.region == 1])
    interior = inside_nodes[~iface_mask[inside_nodes]]
    if len(interior):
        lam = _wachspress_weights(poly.vertices[::-1], mesh.nodes[interior])
        theta[interior] = lam @ V[::-1]

    inside_mask = np.zeros(mesh.n_nodes, dtype=bool)
    inside_mask[inside_nodes] = True
    outside = np.nonzero(~(inside_mask | iface_mask))[0]
    if len(outside):
        if decay is None:
            bnd_ids, _, _ = mesh.boundary_loop()
            bnd_pts = mesh.nodes[bnd_ids]
            clearance = poly.boundary_distance(bnd_pts).min()
            decay = 0.9 * float(clearance)
        pts = mesh.nodes[outside]
        best_d = np.full(len(pts), np.inf)
        best_phi = np.zeros((len(pts), 2))
        for i in range(n):
            a = poly.vertices[i]
            b = poly.vertices[(i + 1) % n]
            ab = b - a
            t_par = np.clip((pts - a) @ ab / (ab @ ab), 0.0, 1.0)
            foot = a + t_par[:, None] * ab
            d = np.linalg.norm(pts - foot, axis=1)
            closer = d < best_d
            best_d[closer] = d[closer]
            phi = V[i] + t_par[:, None] * (V[(i + 1) % n] - V[i])
            best_phi[closer] = phi[closer]
        fade = np.maximum(0.0, 1.0 - best_d / decay)
        theta[outside] = fade[:, None] * best_phi
    return theta


def apply_motion(mesh: Mesh, theta: np.ndarray, t: float) -> Mesh:
    """Move mesh nodes by ``t * theta`` keeping the topology; rejects inverted
    elements."""
    nodes = mesh.nodes + t * np.asarray(theta, dtype=float)
    p0 = nodes[mesh.triangles[:, 0]]
    d1 = nodes[mesh.triangles[:, 1]] - p0
    d2 = nodes[mesh.triangles[:, 2]] - p0
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if np.any(area2 <= 0.0):
        raise MeshError(
            f"mesh motion with t={t:g} inverts {int(np.sum(area2 <= 0))} triangles"
        )
    return Mesh(
        nodes=nodes,
        triangles=mesh.triangles,
        region=mesh.region,
        boundary_edges=mesh.boundary_edges,
        boundary_marker=mesh.boundary_marker,
        interface_edges=mesh.interface_edges,
        interface_edge_index=mesh.interface_edge_index,
        interface_tri_in=mesh.interface_tri_in,
        interface_tri_out=mesh.interface_tri_out,
        constraint_edges=mesh._constraint_edges,
        grading=mesh.grading,
    )
