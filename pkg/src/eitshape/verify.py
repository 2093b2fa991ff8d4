"""Numerical verification studies: fitted convergence rates for the boundary
functional, the energy and boundary-trace differences, the operator-level
derivative, the corner-singularity exponent, and the volume-form identity for
pairing increments.

Rate studies sample a geometric list of perturbation sizes t, compute the
quantity of interest on a mesh conforming to the moved polygon, and fit a
log-log slope.  Two perturbed-mesh strategies are available: ``"morph"``
(matched topology: the base mesh's nodes follow the vertex motion, noise-free
down to solver precision) and ``"fresh"`` (an independent conforming mesh per
t, with a measured discretization floor used to discard samples drowned in
remeshing noise).  Samples below 10x the floor are dropped before fitting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .fem import (
    BoundaryData,
    ConductivitySpec,
    Field,
    SolverError,
    assemble,
    boundary_l2_diff,
    h1_seminorm_diff,
    interface_traces,
    solve_dirichlet,
    solve_neumann,
    triangle_gradients,
)
from .geometry import DomainSpec, Polygon, VelocityField, perturb
from .maps import BoundaryBasis, ForwardCache, dtn_matrix, functional_G, weighted_operator_norm
from .mesh import (
    GradingSpec,
    Mesh,
    MeshError,
    apply_motion,
    generate_mesh,
    interface_motion_field,
    interface_ring,
)
from .shapecalc import ntd_shape_derivative, shape_derivative

__all__ = [
    "RateFit",
    "SingularityFit",
    "StudySetup",
    "FDReference",
    "fit_power_law",
    "default_t_list",
    "derivative_rate_study",
    "energy_rate_study",
    "boundary_rate_study",
    "operator_derivative_check",
    "OperatorDerivativeResult",
    "singularity_study",
    "alessandrini_increment",
    "estimate_remesh_floor",
    "fd_reference",
]


def default_t_list(n: int = 8, t_max: float = 0.1, ratio: float = 0.5) -> np.ndarray:
    """Geometric perturbation sizes, 0.1 down by halving (8 points spans
    about two decades)."""
    return t_max * ratio ** np.arange(n)


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log(value) against log(t).

    ``used`` marks the samples that survived the floor filter; ``degenerate``
    flags studies whose values vanish identically (nothing to fit).
    """

    t: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    residual: float
    n_used: int
    used: np.ndarray
    floor: float
    degenerate: bool = False

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,value\n")
            for t, v in zip(self.t, self.values):
                fh.write(f"{t:.17g},{v:.17g}\n")
            fh.write("slope,residual,n_used\n")
            fh.write(f"{self.slope:.17g},{self.residual:.17g},{self.n_used}\n")


def fit_power_law(t, values, floor: float = 0.0) -> RateFit:
    """Fit the exponent of a power law through (t, value) samples, discarding
    values below 10x the floor (they measure noise, not the rate)."""
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(t) < 4:
        raise SolverError("rate fits need at least 4 samples")
    if np.any(t <= 0):
        raise SolverError("rate fits need positive t")
    used = (values > 10.0 * floor) & (values > 0.0)
    if used.sum() < 2:
        return RateFit(
            t=t,
            values=values,
            slope=float("nan"),
            intercept=float("nan"),
            residual=float("nan"),
            n_used=int(used.sum()),
            used=used,
            floor=floor,
            degenerate=True,
        )
    lt = np.log(t[used])
    lv = np.log(values[used])
    slope, intercept = np.polyfit(lt, lv, 1)
    fitted = slope * lt + intercept
    residual = float(np.sqrt(np.mean((lv - fitted) ** 2)))
    return RateFit(
        t=t,
        values=values,
        slope=float(slope),
        intercept=float(intercept),
        residual=residual,
        n_used=int(used.sum()),
        used=used,
        floor=floor,
    )


@dataclass(frozen=True)
class StudySetup:
    """Shared configuration of a perturbation study: domain, base polygon,
    contrast, data pair, grading and the perturbed-mesh strategy."""

    dom: DomainSpec
    poly: Polygon
    spec: ConductivitySpec
    f: BoundaryData
    g: BoundaryData
    grading: GradingSpec
    strategy: str = "morph"

    def __post_init__(self):
        if self.strategy not in ("morph", "fresh"):
            raise SolverError(f"unknown strategy {self.strategy!r}")
        if self.f.kind != self.g.kind:
            raise SolverError("f and g must be of the same kind")


class _StudyState:
    """Base mesh, solves, traces and derivative for a setup; perturbed meshes
    on demand."""

    def __init__(self, setup: StudySetup):
        self.setup = setup
        self.mesh = generate_mesh(setup.dom, setup.poly, setup.grading)
        self.system = assemble(self.mesh, setup.spec)
        solver = solve_dirichlet if setup.f.kind == "dirichlet" else solve_neumann
        self.u = solver(self.mesh, setup.spec, setup.f, system=self.system)
        self.v = solver(self.mesh, setup.spec, setup.g, system=self.system)
        self.ring = interface_ring(self.mesh, setup.poly)
        self.utr = interface_traces(self.u, self.ring)
        self.vtr = interface_traces(self.v, self.ring)
        self._theta = {}

    def derivative(self, velocity: VelocityField) -> float:
        fn = shape_derivative if self.setup.f.kind == "dirichlet" else ntd_shape_derivative
        return fn(self.setup.poly, self.setup.spec, self.utr, self.vtr, velocity)

    def perturbed_mesh(self, velocity: VelocityField, t: float) -> Mesh:
        if self.setup.strategy == "morph":
            key = velocity.vectors.tobytes()
            if key not in self._theta:
                self._theta[key] = interface_motion_field(self.mesh, self.setup.poly, velocity)
            return apply_motion(self.mesh, self._theta[key], t)
        poly_t = perturb(self.setup.poly, velocity, t)
        return generate_mesh(self.setup.dom, poly_t, self.setup.grading)

    def admissible(self, velocity: VelocityField, t: float) -> bool:
        return abs(t) < self.setup.dom.margin / (2.0 * velocity.stacked_norm())


def estimate_remesh_floor(setup: StudySetup, cache: ForwardCache | None = None) -> float:
    """Discretization floor of the functional: the change of G(0) under a
    remesh with shifted interior point placement."""
    g0a = functional_G(
        setup.dom, setup.poly, setup.spec, setup.f, setup.g, setup.grading, cache=cache
    )
    mesh_b = generate_mesh(setup.dom, setup.poly, setup.grading, _lattice_shift=(0.217, 0.133))
    g0b = functional_G(
        setup.dom, setup.poly, setup.spec, setup.f, setup.g, setup.grading, mesh=mesh_b
    )
    return abs(g0a - g0b)


def _filtered_ts(state: _StudyState, velocity: VelocityField, t_list) -> np.ndarray:
    ts = []
    for t in np.asarray(t_list, dtype=float):
        if state.admissible(velocity, t):
            ts.append(t)
        else:
            warnings.warn(
                f"t={t:g} outside the admissible range |t| < margin / (2 |V|), skipped",
                stacklevel=3,
            )
    return np.array(ts)


def derivative_rate_study(
    setup: StudySetup, velocity: VelocityField, t_list=None
) -> RateFit:
    """Residual rate of the first-order expansion:
    e(t) = |G(t) - G(0) - t G'(0)| with G'(0) from the boundary formula."""
    t_list = default_t_list() if t_list is None else t_list
    state = _StudyState(setup)
    ts = _filtered_ts(state, velocity, t_list)
    g0 = functional_G(
        setup.dom, setup.poly, setup.spec, setup.f, setup.g, setup.grading, mesh=state.mesh
    )
    dg = state.derivative(velocity)
    vals = []
    for t in ts:
        mesh_t = state.perturbed_mesh(velocity, t)
        gt = functional_G(
            setup.dom,
            perturb(setup.poly, velocity, t),
            setup.spec,
            setup.f,
            setup.g,
            setup.grading,
            mesh=mesh_t,
        )
        vals.append(abs(gt - g0 - t * dg))
    floor = 1e-12 * max(abs(g0), 1.0)
    if setup.strategy == "fresh":
        floor = max(floor, estimate_remesh_floor(setup))
    return fit_power_law(ts, vals, floor=floor)


def energy_rate_study(setup: StudySetup, velocity: VelocityField, t_list=None) -> RateFit:
    """Rate of the energy-norm difference |u_t - u_0|_{H1 seminorm}.

    Each sample solves both problems on one mesh conforming to both the base
    and the moved polygon, so the difference of the two P1 fields -- whose
    gradient is O(1) on the swept region of width ~t -- is integrated exactly.
    Quadrature across non-matching meshes would miss the swept region once t
    falls below the local element size and fake a higher rate.
    """
    t_list = default_t_list() if t_list is None else t_list
    if setup.f.kind != "dirichlet":
        raise SolverError("the energy rate study solves Dirichlet problems")
    state = _StudyState(setup)
    ts = _filtered_ts(state, velocity, t_list)
    vals = []
    for t in ts:
        poly_t = perturb(setup.poly, velocity, t)
        mesh_b = generate_mesh(setup.dom, [setup.poly, poly_t], setup.grading)
        sys0 = assemble(mesh_b, setup.spec)
        sys_t = assemble(mesh_b, setup.spec, region_poly=poly_t)
        u0 = solve_dirichlet(mesh_b, setup.spec, setup.f, system=sys0)
        u_t = solve_dirichlet(mesh_b, setup.spec, setup.f, system=sys_t)
        vals.append(h1_seminorm_diff(u_t, u0))
    return fit_power_law(ts, vals, floor=0.0)


def boundary_rate_study(setup: StudySetup, velocity: VelocityField, t_list=None) -> RateFit:
    """Rate of the squared boundary-trace mismatch
    integral over the domain boundary of (u_t - u_0)^2, Neumann problems.

    The squared quantity is what the superlinear estimate controls (and what
    the misfit expansion consumes): the trace difference itself is first order
    in t -- it is t times the derivative operator applied to the excitation --
    so its own slope is 1 by construction.
    """
    t_list = default_t_list() if t_list is None else t_list
    if setup.f.kind != "neumann":
        raise SolverError("the boundary rate study solves Neumann problems")
    state = _StudyState(setup)
    ts = _filtered_ts(state, velocity, t_list)
    vals = []
    for t in ts:
        mesh_t = state.perturbed_mesh(velocity, t)
        u_t = solve_neumann(mesh_t, setup.spec, setup.f)
        vals.append(boundary_l2_diff(u_t, state.u) ** 2)
    return fit_power_law(ts, vals, floor=0.0)


@dataclass(frozen=True)
class OperatorDerivativeResult:
    fit: RateFit
    derivative_matrix: np.ndarray
    symmetry_error: float


def operator_derivative_check(
    setup: StudySetup, velocity: VelocityField, t_list=None, basis: BoundaryBasis | None = None
) -> OperatorDerivativeResult:
    """Rate of the operator-level expansion |Lambda_t - Lambda_0 - t L| in the
    lumped-weighted spectral norm on a fixed mean-zero trig basis; L is the
    derivative operator assembled from the boundary formula over basis pairs."""
    t_list = default_t_list() if t_list is None else t_list
    basis = basis if basis is not None else BoundaryBasis(n_max=4, diamond=True)
    if setup.f.kind != "dirichlet":
        raise SolverError("the operator derivative check works on the flux map")
    state = _StudyState(setup)
    ts = _filtered_ts(state, velocity, t_list)
    D0 = dtn_matrix(state.mesh, setup.spec, basis, system=state.system)
    G = D0.gram

    solver_traces = []
    bnd, interior, lu, A_ib = state.system.dirichlet_factor()
    B = basis.values_on(state.mesh)
    for j in range(B.shape[1]):
        u = np.zeros(state.mesh.n_nodes)
        u[bnd] = B[:, j]
        if len(interior):
            u[interior] = lu.solve(-(A_ib @ B[:, j]))
        fld = Field(mesh=state.mesh, values=u, system=state.system)
        solver_traces.append(interface_traces(fld, state.ring))
    m = len(basis)
    L = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            L[i, j] = shape_derivative(
                setup.poly, setup.spec, solver_traces[j], solver_traces[i], velocity
            )
    sym_err = float(np.abs(L - L.T).max() / max(np.abs(L).max(), 1e-300))
    vals = []
    for t in ts:
        mesh_t = state.perturbed_mesh(velocity, t)
        Dt = dtn_matrix(mesh_t, setup.spec, basis)
        vals.append(weighted_operator_norm(Dt.matrix - D0.matrix - t * L, G))
    floor = 0.0
    if setup.strategy == "fresh":
        floor = estimate_remesh_floor(setup)
    fit = fit_power_law(ts, vals, floor=floor)
    return OperatorDerivativeResult(fit=fit, derivative_matrix=L, symmetry_error=sym_err)


@dataclass(frozen=True)
class SingularityFit:
    """Fitted growth exponent of the gradient near an inclusion vertex:
    max |grad u| over the annulus at radius r fits C r^(omega - 1)."""

    vertex: int
    radii: np.ndarray
    values: np.ndarray
    omega: float
    slope: float
    n_inner: int


def singularity_study(
    mesh: Mesh,
    u: Field,
    poly: Polygon,
    vertex: int,
    radii=None,
    *,
    min_inner_triangles: int = 20,
) -> SingularityFit:
    """Fit the corner exponent from per-annulus gradient maxima around one
    polygon vertex.  Annuli default to 6 radii in geometric ratio 0.6 starting
    at a quarter of the shorter adjacent edge."""
    n = poly.n_vertices
    if not 0 <= vertex < n:
        raise SolverError(f"vertex index {vertex} out of range")
    p = poly.vertices[vertex]
    if radii is None:
        len_next = float(np.linalg.norm(poly.vertices[(vertex + 1) % n] - p))
        len_prev = float(np.linalg.norm(poly.vertices[vertex - 1] - p))
        r0 = min(len_next, len_prev) / 4.0
        radii = r0 * 0.6 ** np.arange(6)
    radii = np.asarray(radii, dtype=float)
    if len(radii) < 4 or np.any(np.diff(radii) >= 0):
        raise SolverError("radii must be a strictly decreasing list of 4 or more")
    grads = triangle_gradients(mesh, u.values)
    gmag = np.linalg.norm(grads, axis=1)
    dist = np.linalg.norm(mesh.triangle_centroids() - p, axis=1)
    vals = []
    reps = []
    counts = []
    for r_out, r_in in zip(radii[:-1], radii[1:]):
        sel = (dist >= r_in) & (dist < r_out)
        counts.append(int(sel.sum()))
        if counts[-1] == 0:
            vals.append(0.0)
        else:
            vals.append(float(gmag[sel].max()))
        reps.append(np.sqrt(r_in * r_out))
    n_inner = counts[-1]
    if n_inner < min_inner_triangles:
        eff = mesh.grading.resolved_h_min if mesh.grading is not None else float("nan")
        area_inner = np.pi * (radii[-2] ** 2 - radii[-1] ** 2)
        need = float(np.sqrt(area_inner / (min_inner_triangles * np.sqrt(3.0))))
        raise SolverError(
            f"innermost annulus holds {n_inner} triangles (< {min_inner_triangles}); "
            f"refine to h_min <= {need:.3g} (current {eff:.3g})"
        )
    reps = np.asarray(reps)
    vals = np.asarray(vals)
    slope, _ = np.polyfit(np.log(reps), np.log(vals), 1)
    return SingularityFit(
        vertex=vertex,
        radii=radii,
        values=vals,
        omega=float(1.0 + slope),
        slope=float(slope),
        n_inner=n_inner,
    )


def alessandrini_increment(
    mesh_both: Mesh,
    u_t: Field,
    v_0: Field,
    poly0: Polygon,
    poly_t: Polygon,
    contrast: float,
) -> float:
    """Volume form of the pairing increment: the integral of
    (sigma_t - sigma_0) grad u_t . grad v_0, supported on the symmetric
    difference of the two inclusions.  On a mesh conforming to both polygons
    this equals the difference of the two boundary pairings exactly (discrete
    identity, same solutions)."""
    if u_t.mesh is not mesh_both or v_0.mesh is not mesh_both:
        raise SolverError("both fields must live on the doubly-conforming mesh")
    if np.array_equal(poly0.vertices, poly_t.vertices):
        return 0.0  # empty support
    if len(mesh_both.constraint_edges(1)) == 0:
        raise MeshError("mesh does not conform to a second polygon")
    c = mesh_both.triangle_centroids()
    in0 = mesh_both.region == 1
    in_t = poly_t.contains_points(c)
    sigma0 = np.where(in0, contrast, 1.0)
    sigma_t = np.where(in_t, contrast, 1.0)
    gu = triangle_gradients(mesh_both, u_t.values)
    gv = triangle_gradients(mesh_both, v_0.values)
    return float(
        ((sigma_t - sigma0) * mesh_both.triangle_areas()) @ np.einsum("ij,ij->i", gu, gv)
    )


@dataclass(frozen=True)
class FDReference:
    """Central differences of the functional at halving step sizes, and their
    Richardson extrapolation."""

    t_levels: np.ndarray
    central: np.ndarray
    extrapolated: float


def fd_reference(
    setup: StudySetup,
    velocity: VelocityField,
    t_levels=(4e-3, 2e-3, 1e-3),
    *,
    state: "_StudyState | None" = None,
) -> FDReference:
    """Finite-difference reference for the derivative of the functional:
    central differences over meshes conforming to the moved polygon at each
    of three halving steps, Richardson-extrapolated twice."""
    t_levels = np.asarray(t_levels, dtype=float)
    if len(t_levels) != 3 or not np.allclose(t_levels[:-1] / t_levels[1:], 2.0):
        raise SolverError("fd_reference expects three halving step sizes")
    state = state if state is not None else _StudyState(setup)
    D = []
    for t in t_levels:
        vals = {}
        for s in (+t, -t):
            mesh_s = state.perturbed_mesh(velocity, s)
            vals[s] = functional_G(
                setup.dom,
                perturb(setup.poly, velocity, s),
                setup.spec,
                setup.f,
                setup.g,
                setup.grading,
                mesh=mesh_s,
            )
        D.append((vals[+t] - vals[-t]) / (2.0 * t))
    R1 = [(4.0 * D[i + 1] - D[i]) / 3.0 for i in range(2)]
    R2 = (16.0 * R1[1] - R1[0]) / 15.0
    return FDReference(t_levels=t_levels, central=np.array(D), extrapolated=float(R2))
