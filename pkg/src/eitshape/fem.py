"""P1 finite elements for the piecewise-constant conductivity equation.

The weak form of ``div(sigma grad u) = 0`` is assembled once per
(mesh, contrast) pair into a full stiffness matrix; Dirichlet solves eliminate
boundary rows, Neumann solves append one Lagrange-multiplier row enforcing the
lumped boundary mean.  Both use a sparse LU factorization that is cached on
the system and reused across right-hand sides (boundary-operator columns,
finite-difference sweeps), with an explicit residual check against the
``rtol`` contract.

Boundary quantities live on the counterclockwise boundary node loop; boundary
integrals use the per-edge trapezoid (lumped) rule throughout, which makes the
misfit quadrature and the adjoint right-hand side exact discrete transposes of
each other.

``boundary_pairing`` evaluates the flux pairing variationally,
``g . (A u)`` on boundary rows, which equals the volume form
``integral(sigma grad u . grad Eg)`` for any extension ``Eg`` of ``g`` by
Galerkin orthogonality; pointwise normal differences of P1 gradients would
lose an order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix
from scipy.sparse.linalg import splu

from .geometry import Polygon
from .mesh import InterfaceRing, Mesh, MeshError

__all__ = [
    "SolverError",
    "ConductivitySpec",
    "BoundaryData",
    "BoundaryTrace",
    "Field",
    "GradientTraces",
    "LinearSystem",
    "assemble",
    "solve_dirichlet",
    "solve_neumann",
    "triangle_gradients",
    "gradient_trace",
    "boundary_pairing",
    "ntd_pairing",
    "h1_seminorm_diff",
    "boundary_l2_diff",
    "project_mean_zero",
    "save_field",
    "load_field_values",
]

DEFAULT_RTOL = 1e-10
MAX_PRINCIPLE_SLACK = 1e-8


class SolverError(RuntimeError):
    """Solver contract violation (residual, compatibility, mesh mismatch)."""


@dataclass(frozen=True)
class ConductivitySpec:
    """Conductivity contrast: sigma = contrast inside the inclusion, 1 outside.

    contrast = 1 is accepted for validation paths (uniform background)."""

    contrast: float

    def __post_init__(self):
        if not np.isfinite(self.contrast) or self.contrast <= 0:
            raise SolverError(f"contrast must be positive and finite, got {self.contrast!r}")


def project_mean_zero(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Remove the weighted mean; the projection used for Neumann data."""
    values = np.asarray(values, dtype=float)
    return values - (weights @ values) / weights.sum()


class BoundaryData:
    """Dirichlet or Neumann boundary data.

    Two representations: a trigonometric mode in the boundary arc-length angle
    (index 0 is the constant, odd index 2m-1 is cos(m theta), even index 2m is
    sin(m theta)), which transfers between meshes, or nodal values bound to one
    mesh's boundary loop.  Neumann trig data is projected to the lumped mean
    before use; Neumann nodal data must already be compatible.
    """

    def __init__(self, kind, trig_index=None, values=None, mesh=None):
        if kind not in ("dirichlet", "neumann"):
            raise SolverError(f"unknown boundary data kind {kind!r}")
        if (trig_index is None) == (values is None):
            raise SolverError("give exactly one of trig_index or nodal values")
        self.kind = kind
        self.trig_index = trig_index
        self._values = None if values is None else np.asarray(values, dtype=float)
        self._mesh = mesh
        if values is not None and mesh is None:
            raise SolverError("nodal boundary data must reference its mesh")
        if kind == "neumann" and trig_index == 0:
            raise SolverError("the constant mode is not compatible Neumann data")

    @classmethod
    def trig(cls, kind: str, index: int) -> "BoundaryData":
        if index < 0:
            raise SolverError("trig index must be nonnegative")
        return cls(kind, trig_index=index)

    @classmethod
    def nodal(cls, kind: str, mesh: Mesh, loop_values) -> "BoundaryData":
        ids, _, _ = mesh.boundary_loop()
        loop_values = np.asarray(loop_values, dtype=float)
        if loop_values.shape != (len(ids),):
            raise SolverError(
                f"expected {len(ids)} boundary values in loop order, got {loop_values.shape}"
            )
        return cls(kind, values=loop_values, mesh=mesh)

    @classmethod
    def from_callable(cls, kind: str, mesh: Mesh, fn: Callable) -> "BoundaryData":
        ids, _, _ = mesh.boundary_loop()
        pts = mesh.nodes[ids]
        return cls.nodal(kind, mesh, np.array([fn(x, y) for x, y in pts]))

    def signature(self):
        if self.trig_index is not None:
            return ("trig", self.kind, self.trig_index)
        return ("nodal", self.kind, hash(self._values.tobytes()), id(self._mesh))

    def boundary_values(self, mesh: Mesh) -> np.ndarray:
        """Values on the mesh's boundary loop (Neumann data mean-corrected /
        validated)."""
        ids, arclen, perimeter = mesh.boundary_loop()
        if self.trig_index is not None:
            theta = 2.0 * np.pi * arclen / perimeter
            n = self.trig_index
            if n == 0:
                vals = np.ones_like(theta)
            elif n % 2 == 1:
                vals = np.cos(((n + 1) // 2) * theta)
            else:
                vals = np.sin((n // 2) * theta)
            if self.kind == "neumann":
                vals = project_mean_zero(vals, mesh.boundary_weights())
            return vals
        if self._mesh is not mesh:
            raise SolverError("nodal boundary data used with a different mesh")
        vals = self._values
        if self.kind == "neumann":
            w = mesh.boundary_weights()
            mean = abs(w @ vals)
            if mean > 1e-10 * max(1.0, np.abs(vals).max() * perimeter):
                raise SolverError(
                    f"Neumann data has nonzero boundary mean {mean:.3e}; "
                    "project it before solving"
                )
        return vals


@dataclass(frozen=True)
class BoundaryTrace:
    """A function on the domain boundary, sampled at arclength positions.

    Used to carry measured boundary voltages between meshes; interpolation is
    periodic piecewise-linear.
    """

    arclengths: np.ndarray
    values: np.ndarray
    perimeter: float

    def interp(self, at: np.ndarray) -> np.ndarray:
        xp = np.concatenate([self.arclengths, [self.perimeter + self.arclengths[0]]])
        fp = np.concatenate([self.values, [self.values[0]]])
        return np.interp(np.asarray(at, dtype=float) % self.perimeter, xp, fp)

    @classmethod
    def from_field(cls, u: "Field") -> "BoundaryTrace":
        ids, arclen, perimeter = u.mesh.boundary_loop()
        return cls(arclengths=arclen, values=u.values[ids].copy(), perimeter=perimeter)


@dataclass
class Field:
    """P1 nodal solution with a tag describing its problem."""

    mesh: Mesh
    values: np.ndarray
    tag: str = ""
    system: "LinearSystem | None" = field(default=None, repr=False, compare=False)
    max_principle_overshoot: float = 0.0

    def boundary_trace(self) -> BoundaryTrace:
        return BoundaryTrace.from_field(self)

    def loop_values(self) -> np.ndarray:
        ids, _, _ = self.mesh.boundary_loop()
        return self.values[ids]


def triangle_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Constant P1 gradient on every triangle, shape (m, 2)."""
    t = mesh.triangles
    p0, p1, p2 = mesh.nodes[t[:, 0]], mesh.nodes[t[:, 1]], mesh.nodes[t[:, 2]]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (
        p2[:, 0] - p0[:, 0]
    )
    v0, v1, v2 = values[t[:, 0]], values[t[:, 1]], values[t[:, 2]]
    gx = (v1 - v0) * (p2[:, 1] - p0[:, 1]) - (v2 - v0) * (p1[:, 1] - p0[:, 1])
    gy = (v2 - v0) * (p1[:, 0] - p0[:, 0]) - (v1 - v0) * (p2[:, 0] - p0[:, 0])
    return np.column_stack([gx, gy]) / det[:, None]


class LinearSystem:
    """Assembled stiffness with cached factorizations.

    The full matrix keeps constants in its kernel (row sums vanish) until
    boundary conditions are applied; Dirichlet elimination gives an SPD block,
    the Neumann mean constraint a symmetric quasi-definite bordered system.
    """

    def __init__(self, mesh: Mesh, spec: ConductivitySpec, sigma: np.ndarray, A):
        self.mesh = mesh
        self.spec = spec
        self.sigma = sigma
        self.A = A
        self._dirichlet = None
        self._neumann = None

    def energy(self, u: np.ndarray, v: np.ndarray) -> float:
        """Bilinear form integral(sigma grad u . grad v)."""
        return float(u @ (self.A @ v))

    def _boundary_interior(self):
        ids, _, _ = self.mesh.boundary_loop()
        mask = np.zeros(self.mesh.n_nodes, dtype=bool)
        mask[ids] = True
        return ids, np.nonzero(~mask)[0]

    def dirichlet_factor(self):
        if self._dirichlet is None:
            bnd, interior = self._boundary_interior()
            A_ii = csc_matrix(self.A[interior][:, interior])
            A_ib = self.A[interior][:, bnd]
            self._dirichlet = (bnd, interior, splu(A_ii), A_ib)
        return self._dirichlet

    def neumann_factor(self):
        if self._neumann is None:
            bnd, _ = self._boundary_interior()
            n = self.mesh.n_nodes
            w = self.mesh.boundary_weights()
            m = np.zeros(n)
            m[bnd] = w
            A = self.A.tocoo()
            rows = np.concatenate([A.row, np.arange(n), np.full(n, n)])
            cols = np.concatenate([A.col, np.full(n, n), np.arange(n)])
            vals = np.concatenate([A.data, m, m])
            aug = csc_matrix(coo_matrix((vals, (rows, cols)), shape=(n + 1, n + 1)))
            self._neumann = (bnd, w, m, splu(aug))
        return self._neumann


def assemble(mesh: Mesh, spec: ConductivitySpec, region_poly: Polygon | None = None) -> LinearSystem:
    """Stiffness matrix of the conductivity form; sigma per triangle is the
    contrast inside the (first, or given) polygon and 1 outside."""
    if region_poly is None:
        inside = mesh.region == 1
    else:
        inside = region_poly.contains_points(mesh.triangle_centroids())
    sigma = np.where(inside, spec.contrast, 1.0)

    t = mesh.triangles
    p0, p1, p2 = mesh.nodes[t[:, 0]], mesh.nodes[t[:, 1]], mesh.nodes[t[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if np.any(det <= 0):
        raise SolverError("degenerate triangle in assembly")
    area = 0.5 * det
    g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
    g0 = -(g1 + g2)
    grads = (g0, g1, g2)
    coeff = sigma * area
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            rows.append(t[:, a])
            cols.append(t[:, b])
            vals.append(coeff * np.einsum("ij,ij->i", grads[a], grads[b]))
    A = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_nodes, mesh.n_nodes),
    ).tocsr()
    return LinearSystem(mesh, spec, sigma, A)


def _check_residual(resid: float, scale: float, rtol: float, what: str):
    if not np.isfinite(resid) or resid > rtol * max(scale, 1e-300):
        raise SolverError(
            f"{what} residual {resid:.3e} exceeds rtol {rtol:g} * {scale:.3e}"
        )


def solve_dirichlet(
    mesh: Mesh,
    spec: ConductivitySpec,
    data: BoundaryData,
    *,
    system: LinearSystem | None = None,
    rtol: float = DEFAULT_RTOL,
) -> Field:
    """Solve the transmission problem with Dirichlet boundary values."""
    if data.kind != "dirichlet":
        raise SolverError("solve_dirichlet needs dirichlet-kind data")
    sys_ = system if system is not None else assemble(mesh, spec)
    if sys_.mesh is not mesh:
        raise SolverError("system/mesh mismatch")
    bnd, interior, lu, A_ib = sys_.dirichlet_factor()
    f = data.boundary_values(mesh)
    u = np.zeros(mesh.n_nodes)
    u[bnd] = f
    if len(interior):
        rhs = -(A_ib @ f)
        u[interior] = lu.solve(rhs)
        resid = np.linalg.norm(sys_.A[interior] @ u - 0.0)
        _check_residual(float(resid), float(np.linalg.norm(rhs)), rtol, "Dirichlet")
    overshoot = max(0.0, float(u.max() - f.max()), float(f.min() - u.min()))
    fld = Field(mesh=mesh, values=u, tag=f"dirichlet:{data.signature()}", system=sys_)
    fld.max_principle_overshoot = overshoot
    span = max(float(f.max() - f.min()), 1.0)
    if overshoot > MAX_PRINCIPLE_SLACK * span:
        fld.tag += "|max-principle-overshoot"
    return fld


def solve_neumann(
    mesh: Mesh,
    spec: ConductivitySpec,
    data: BoundaryData,
    *,
    system: LinearSystem | None = None,
    rtol: float = DEFAULT_RTOL,
) -> Field:
    """Solve the transmission problem with mean-zero Neumann data and the
    lumped zero-mean normalization of the trace."""
    if data.kind != "neumann":
        raise SolverError("solve_neumann needs neumann-kind data")
    sys_ = system if system is not None else assemble(mesh, spec)
    if sys_.mesh is not mesh:
        raise SolverError("system/mesh mismatch")
    bnd, w, m, lu = sys_.neumann_factor()
    g = data.boundary_values(mesh)
    n = mesh.n_nodes
    rhs = np.zeros(n + 1)
    rhs[bnd] = w * g
    sol = lu.solve(rhs)
    u = sol[:n]
    resid_vec = sys_.A @ u + sol[n] * m - rhs[:n]
    _check_residual(
        float(np.linalg.norm(resid_vec)) + abs(m @ u),
        float(np.linalg.norm(rhs)),
        rtol,
        "Neumann",
    )
    return Field(mesh=mesh, values=u, tag=f"neumann:{data.signature()}", system=sys_)


@dataclass(frozen=True)
class GradientTraces:
    """One-sided gradients on the interface ring, one 2-vector per ring edge."""

    ring: InterfaceRing
    side: str
    vectors: np.ndarray


@dataclass(frozen=True)
class TracePair:
    """Both one-sided gradients of a field on the interface ring."""

    ring: InterfaceRing
    exterior: np.ndarray
    interior: np.ndarray


def gradient_trace(u: Field, ring: InterfaceRing, side: str) -> GradientTraces:
    """Gradient of ``u`` restricted to the triangles adjacent to the interface
    on the requested side ("interior" or "exterior"); constant per edge."""
    if side not in ("interior", "exterior"):
        raise SolverError(f"side must be 'interior' or 'exterior', got {side!r}")
    if ring.mesh is not u.mesh:
        raise SolverError("ring belongs to a different mesh than the field")
    grads = triangle_gradients(u.mesh, u.values)
    tris = ring.tri_in if side == "interior" else ring.tri_out
    return GradientTraces(ring=ring, side=side, vectors=grads[tris])


def interface_traces(u: Field, ring: InterfaceRing) -> TracePair:
    """Exterior and interior gradient traces of a field in one pass."""
    if ring.mesh is not u.mesh:
        raise SolverError("ring belongs to a different mesh than the field")
    grads = triangle_gradients(u.mesh, u.values)
    return TracePair(ring=ring, exterior=grads[ring.tri_out], interior=grads[ring.tri_in])


def boundary_pairing(u: Field, g: BoundaryData) -> float:
    """Flux pairing of a Dirichlet solution u with boundary function g,
    computed variationally (extension-independent by Galerkin orthogonality)."""
    if u.system is None:
        raise SolverError("field carries no assembled system")
    if g.kind != "dirichlet":
        raise SolverError("boundary_pairing pairs against dirichlet-kind values")
    ids, _, _ = u.mesh.boundary_loop()
    r = u.system.A @ u.values
    return float(r[ids] @ g.boundary_values(u.mesh))


def ntd_pairing(u: Field, g: BoundaryData) -> float:
    """Current-to-voltage pairing of a Neumann solution's trace with a
    mean-zero boundary density g (lumped boundary quadrature)."""
    if g.kind != "neumann":
        raise SolverError("ntd_pairing needs neumann-kind data")
    ids, _, _ = u.mesh.boundary_loop()
    w = u.mesh.boundary_weights()
    return float((w * g.boundary_values(u.mesh)) @ u.values[ids])


def h1_seminorm_diff(u: Field, v: Field) -> float:
    """L2 norm of grad(u) - grad(v); cross-mesh via one-point quadrature on
    the finer mesh with point location into the coarser."""
    if u.mesh is v.mesh:
        d = triangle_gradients(u.mesh, u.values) - triangle_gradients(v.mesh, v.values)
        return float(np.sqrt(u.mesh.triangle_areas() @ np.einsum("ij,ij->i", d, d)))
    fine, coarse = (u, v) if u.mesh.n_nodes >= v.mesh.n_nodes else (v, u)
    gf = triangle_gradients(fine.mesh, fine.values)
    gc = triangle_gradients(coarse.mesh, coarse.values)
    loc = coarse.mesh.locate(fine.mesh.triangle_centroids())
    d = gf - gc[loc]
    return float(np.sqrt(fine.mesh.triangle_areas() @ np.einsum("ij,ij->i", d, d)))


def boundary_l2_diff(u: Field, v: Field) -> float:
    """L2(boundary) norm of u - v, lumped trapezoid quadrature on the finer
    boundary loop (cross-mesh traces interpolated by arclength)."""
    if u.mesh is v.mesh:
        ids, _, _ = u.mesh.boundary_loop()
        w = u.mesh.boundary_weights()
        d = u.values[ids] - v.values[ids]
        return float(np.sqrt(w @ d**2))
    fine, coarse = (
        (u, v) if len(u.mesh.boundary_loop()[0]) >= len(v.mesh.boundary_loop()[0]) else (v, u)
    )
    ids, arclen, _ = fine.mesh.boundary_loop()
    w = fine.mesh.boundary_weights()
    d = fine.values[ids] - BoundaryTrace.from_field(coarse).interp(arclen)
    return float(np.sqrt(w @ d**2))


def save_field(u: Field, path):
    """Text dump: FIELD n then node_id value lines at 17 significant digits."""
    lines = [f"FIELD {len(u.values)}"]
    for i, val in enumerate(u.values):
        lines.append(f"{i} {val:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_field_values(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if header[0] != "FIELD":
            raise SolverError("not a field dump")
        n = int(header[1])
        vals = np.empty(n)
        for _ in range(n):
            i, v = fh.readline().split()
            vals[int(i)] = float(v)
    return vals
