"""Boundary-integral shape derivatives of boundary pairings under vertex
motions, and the adjoint gradient of the boundary misfit.

The derivative of the Dirichlet flux pairing under vertex velocities V is

    (k - 1) * integral over the inclusion boundary of
        (M0 grad_u_ext . grad_v_ext) * (Phi_V . n0)

where M0 rescales the normal component of an exterior-side gradient by 1/k
(the transmission matrix with eigenpairs (tangent, 1), (normal, 1/k)) and
Phi_V is the edge-affine interface velocity.  Quadrature is one-point midpoint
per interface mesh edge: the integrand is a per-edge constant times an affine
factor, which the midpoint rule integrates exactly.  No cutoff is applied at
polygon vertices; the integrand is integrable there and mesh grading controls
the quadrature error.

Two transmission-equivalent discretizations of the integrand are provided:

* ``"transmission_symmetric"`` (default): the symmetrized cross product
  ``(grad_u_ext . grad_v_int + grad_u_int . grad_v_ext) / 2``.  The one-sided
  P1 trace errors largely cancel between the factors; measured against
  finite differences and closed-form concentric-disk derivatives this is
  several times more accurate than the one-sided form at equal resolution,
  and it is exactly symmetric in (u, v).
* ``"exterior_m0"``: M0 applied to exterior-side traces of both factors, kept
  as the cross-check of the transmission handling.

Sign conventions (verified against closed-form concentric-disk derivatives
and finite differences): the voltage pairing of the *Neumann* problem moves
opposite to the flux pairing, so the Neumann-side derivative and the misfit
gradient carry a leading minus relative to the Dirichlet formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import (
    BoundaryData,
    BoundaryTrace,
    ConductivitySpec,
    Field,
    GradientTraces,
    SolverError,
    TracePair,
    interface_traces,
    project_mean_zero,
    solve_neumann,
)
from .geometry import DomainSpec, EdgeFrame, Polygon, VelocityField, edge_frames
from .maps import ForwardCache
from .mesh import GradingSpec, Mesh

__all__ = [
    "ShapeGradient",
    "apply_m0",
    "shape_derivative",
    "ntd_shape_derivative",
    "per_vertex_gradient",
    "misfit",
    "adjoint_state",
    "misfit_gradient",
    "forward_neumann",
    "DEFAULT_INTEGRAND",
]

DEFAULT_INTEGRAND = "transmission_symmetric"


def apply_m0(grad, frame: EdgeFrame, contrast: float) -> np.ndarray:
    """Transmission matrix action: keep the tangential component, scale the
    normal one by 1/contrast.  Maps an exterior-side gradient to the interior
    side."""
    grad = np.asarray(grad, dtype=float)
    t, n = frame.tangent, frame.normal
    return (grad @ t) * t + (grad @ n) / contrast * n


@dataclass(frozen=True)
class ShapeGradient:
    """Per-vertex 2-vectors g_i representing a derivative linear in the vertex
    velocity: pairing with V gives sum_i g_i . V_i."""

    vectors: np.ndarray

    def pair(self, velocity: VelocityField) -> float:
        if len(velocity) != len(self.vectors):
            raise SolverError("velocity length does not match gradient")
        return float(np.sum(self.vectors * velocity.vectors))

    def norm(self) -> float:
        return float(np.linalg.norm(self.vectors))

    def __neg__(self):
        return ShapeGradient(-self.vectors)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("vertex_index,gx,gy\n")
            for i, (gx, gy) in enumerate(self.vectors):
                fh.write(f"{i},{gx:.17g},{gy:.17g}\n")


def _edge_integrand(poly, contrast, u_traces, v_traces, integrand):
    """Per-ring-edge values of the transmission product, plus the ring and the
    per-edge outward normals."""
    ring = u_traces.ring
    if v_traces.ring is not ring:
        raise SolverError("u and v traces must come from the same interface ring")
    if not np.array_equal(ring.poly.vertices, poly.vertices):
        raise SolverError("traces were sampled on a different polygon")
    tangents, normals, _ = edge_frames(poly)
    ne = normals[ring.edge_index]

    if integrand == "auto":
        integrand = (
            DEFAULT_INTEGRAND
            if isinstance(u_traces, TracePair) and isinstance(v_traces, TracePair)
            else "exterior_m0"
        )
    if integrand == "transmission_symmetric":
        if not (isinstance(u_traces, TracePair) and isinstance(v_traces, TracePair)):
            raise SolverError("transmission_symmetric needs both-side traces (TracePair)")
        q = 0.5 * (
            np.einsum("ij,ij->i", u_traces.exterior, v_traces.interior)
            + np.einsum("ij,ij->i", u_traces.interior, v_traces.exterior)
        )
    elif integrand == "exterior_m0":
        ue = u_traces.exterior if isinstance(u_traces, TracePair) else u_traces.vectors
        ve = v_traces.exterior if isinstance(v_traces, TracePair) else v_traces.vectors
        if isinstance(u_traces, GradientTraces) and u_traces.side != "exterior":
            raise SolverError("exterior_m0 takes exterior-side traces")
        if isinstance(v_traces, GradientTraces) and v_traces.side != "exterior":
            raise SolverError("exterior_m0 takes exterior-side traces")
        te = tangents[ring.edge_index]
        ut = np.einsum("ij,ij->i", ue, te)
        un = np.einsum("ij,ij->i", ue, ne)
        vt = np.einsum("ij,ij->i", ve, te)
        vn = np.einsum("ij,ij->i", ve, ne)
        q = ut * vt + un * vn / contrast
    else:
        raise SolverError(f"unknown integrand {integrand!r}")
    return ring, ne, q


def shape_derivative(
    poly: Polygon,
    spec: ConductivitySpec,
    u_traces,
    v_traces,
    velocity: VelocityField,
    *,
    integrand: str = "auto",
) -> float:
    """Derivative of the Dirichlet flux pairing along the vertex velocity."""
    if len(velocity) != poly.n_vertices:
        raise SolverError("velocity length does not match polygon")
    k = spec.contrast
    ring, ne, q = _edge_integrand(poly, k, u_traces, v_traces, integrand)
    V = velocity.vectors
    n = poly.n_vertices
    va_n = np.einsum("ij,ij->i", V[ring.edge_index], ne)
    vb_n = np.einsum("ij,ij->i", V[(ring.edge_index + 1) % n], ne)
    s = ring.s_mid
    phi_n = (1.0 - s) * va_n + s * vb_n
    return float((k - 1.0) * np.sum(ring.lengths * q * phi_n))


def ntd_shape_derivative(
    poly: Polygon,
    spec: ConductivitySpec,
    u_traces,
    v_traces,
    velocity: VelocityField,
    *,
    integrand: str = "auto",
) -> float:
    """Derivative of the Neumann voltage pairing: the negative of the flux
    formula evaluated on the Neumann solutions' traces."""
    return -shape_derivative(poly, spec, u_traces, v_traces, velocity, integrand=integrand)


def per_vertex_gradient(
    poly: Polygon,
    spec: ConductivitySpec,
    u_traces,
    v_traces,
    *,
    integrand: str = "auto",
) -> ShapeGradient:
    """The derivative as per-vertex 2-vectors: the interface velocity factor is
    affine along each edge, so every edge integral splits into hat-weighted
    contributions to its two endpoint vertices."""
    k = spec.contrast
    ring, ne, q = _edge_integrand(poly, k, u_traces, v_traces, integrand)
    n = poly.n_vertices
    coeff = (k - 1.0) * ring.lengths * q
    g = np.zeros((n, 2))
    np.add.at(g, ring.edge_index, (coeff * (1.0 - ring.s_mid))[:, None] * ne)
    np.add.at(g, (ring.edge_index + 1) % n, (coeff * ring.s_mid)[:, None] * ne)
    return ShapeGradient(g)


def forward_neumann(
    dom: DomainSpec,
    poly: Polygon,
    spec: ConductivitySpec,
    excitation: BoundaryData,
    grading: GradingSpec,
    *,
    cache: ForwardCache | None = None,
    mesh: Mesh | None = None,
) -> Field:
    """Neumann forward solve on a conforming mesh (cached when possible)."""
    if excitation.kind != "neumann":
        raise SolverError("excitation must be neumann-kind")
    if mesh is None:
        cache = cache if cache is not None else ForwardCache()
        mesh = cache.mesh_for(dom, poly, grading)
        return cache.solution_for(mesh, spec, excitation)
    return solve_neumann(mesh, spec, excitation)


def misfit(
    dom: DomainSpec,
    poly: Polygon,
    spec: ConductivitySpec,
    excitation: BoundaryData,
    u_meas: BoundaryTrace,
    grading: GradingSpec,
    *,
    cache: ForwardCache | None = None,
    mesh: Mesh | None = None,
    _field_out: list | None = None,
) -> float:
    """Half the lumped boundary integral of (u - u_meas)^2 for the Neumann
    forward solution of ``excitation`` on the inclusion ``poly``."""
    u = forward_neumann(dom, poly, spec, excitation, grading, cache=cache, mesh=mesh)
    if _field_out is not None:
        _field_out.append(u)
    ids, arclen, perimeter = u.mesh.boundary_loop()
    if abs(u_meas.perimeter - perimeter) > 1e-8 * perimeter:
        raise SolverError(
            "measurement sampled on a different domain boundary "
            f"(perimeter {u_meas.perimeter:g} vs {perimeter:g})"
        )
    w = u.mesh.boundary_weights()
    d = u.values[ids] - u_meas.interp(arclen)
    return 0.5 * float(w @ d**2)


def adjoint_state(mesh: Mesh, spec: ConductivitySpec, u0: Field, u_meas: BoundaryTrace) -> Field:
    """Adjoint Neumann solve driven by the boundary residual u0 - u_meas,
    projected onto compatible (mean-zero) data."""
    if u0.mesh is not mesh:
        raise SolverError("u0 was solved on a different mesh")
    ids, arclen, _ = mesh.boundary_loop()
    w = mesh.boundary_weights()
    residual = u0.values[ids] - u_meas.interp(arclen)
    g = project_mean_zero(residual, w)
    data = BoundaryData.nodal("neumann", mesh, g)
    w0 = solve_neumann(mesh, spec, data, system=u0.system)
    w0.tag = "adjoint"
    return w0


def misfit_gradient(
    poly: Polygon,
    spec: ConductivitySpec,
    u0_traces,
    w0_traces,
    *,
    integrand: str = "auto",
) -> ShapeGradient:
    """Per-vertex gradient of the misfit: the adjoint pairing of the forward
    and adjoint traces, with the Neumann-side sign."""
    return -per_vertex_gradient(poly, spec, u0_traces, w0_traces, integrand=integrand)
