"""Reconstruction of a polygonal inclusion from boundary voltage data by
adjoint-gradient descent on the vertex coordinates.

Each iteration solves one Neumann forward problem and one adjoint problem per
measurement on a mesh conforming to the current polygon (one factorization
serves both), sums the per-measurement misfits and adjoint gradients, and
takes an Armijo-backtracked step along the negative gradient.  Trial steps
that violate the admissibility constraints are rejected inside the
backtracking loop, and the step is capped so no vertex moves more than a
quarter of the boundary margin per iteration (the perturbation regime of the
derivative formula).  The contrast is known; only vertices are estimated.

Synthetic data comes from a finer, independently generated mesh so that the
inversion never sees its own discretization (inverse-crime mitigation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import (
    BoundaryData,
    BoundaryTrace,
    ConductivitySpec,
    SolverError,
    interface_traces,
    solve_neumann,
)
from .geometry import (
    ConstraintParams,
    DomainSpec,
    GeometryError,
    Polygon,
    VelocityField,
    point_segment_distance,
    validate_constraints,
)
from .maps import ForwardCache
from .mesh import GradingSpec, MeshError, generate_mesh, interface_ring
from .shapecalc import adjoint_state, misfit_gradient

__all__ = [
    "Measurement",
    "OptimizerConfig",
    "Trajectory",
    "TrajectoryRecord",
    "reconstruct",
    "synthesize_data",
    "hausdorff_vertex_error",
]


@dataclass(frozen=True)
class Measurement:
    """One excitation with its measured boundary voltages (arclength-sampled)
    and the noise level that was applied to them."""

    excitation: BoundaryData
    trace: BoundaryTrace
    noise_level: float = 0.0
    achieved_snr: float | None = None

    def __post_init__(self):
        if self.excitation.kind != "neumann":
            raise SolverError("measurements are driven by neumann excitations")


@dataclass(frozen=True)
class OptimizerConfig:
    """Armijo descent parameters and the admissibility constraints every
    iterate must satisfy."""

    constraints: ConstraintParams
    max_iterations: int = 200
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    initial_step: float | None = None
    grad_tol: float = 1e-9
    stagnation_tol: float = 1e-4
    step_floor: float = 1e-12
    fd_check_every: int = 10

    def __post_init__(self):
        if not 0 < self.armijo_c1 < 1:
            raise SolverError("armijo_c1 must lie in (0, 1)")
        if not 0 < self.backtrack < 1:
            raise SolverError("backtrack factor must lie in (0, 1)")


@dataclass
class TrajectoryRecord:
    iteration: int
    J: float
    grad_norm: float
    step: float
    accepted: bool
    vertices: np.ndarray
    fd_check: float | None = None


@dataclass
class Trajectory:
    records: list
    status: str
    final_polygon: Polygon

    def to_csv(self, path):
        n = self.final_polygon.n_vertices
        cols = ",".join(f"x{i+1},y{i+1}" for i in range(n))
        with open(path, "w") as fh:
            fh.write(f"iter,J,grad_norm,step,accepted,{cols}\n")
            for r in self.records:
                flat = ",".join(f"{c:.17g}" for c in r.vertices.ravel())
                fh.write(
                    f"{r.iteration},{r.J:.17g},{r.grad_norm:.17g},"
                    f"{r.step:.17g},{int(r.accepted)},{flat}\n"
                )

    @property
    def final_misfit(self) -> float:
        return self.records[-1].J

    def accepted_misfits(self) -> np.ndarray:
        return np.array([r.J for r in self.records if r.accepted or r.iteration == 0])


def synthesize_data(
    dom: DomainSpec,
    true_poly: Polygon,
    spec: ConductivitySpec,
    excitations,
    grading: GradingSpec,
    *,
    mesh_scale: float = 2.0,
    noise_level: float = 0.0,
    seed: int = 0,
) -> list:
    """Boundary voltage data for each excitation, solved on a mesh refined by
    ``mesh_scale`` relative to the working grading and laid out independently
    (shifted interior lattice).  Noise is Gaussian with standard deviation
    ``noise_level`` times the RMS of the mean-removed clean trace, drawn from
    the fixed seed."""
    data_grading = GradingSpec(
        h=grading.h / mesh_scale,
        h_min=grading.resolved_h_min / mesh_scale,
        exponent=grading.exponent,
        radius=grading.radius,
    )
    mesh = generate_mesh(dom, true_poly, data_grading, _lattice_shift=(0.3173, 0.1417))
    rng = np.random.default_rng(seed)
    measurements = []
    system = None
    for exc in excitations:
        if isinstance(exc, int):
            exc = BoundaryData.trig("neumann", exc)
        u = solve_neumann(mesh, spec, exc, system=system)
        system = u.system
        trace = u.boundary_trace()
        values = trace.values
        snr = None
        if noise_level > 0:
            clean = values - values.mean()
            sigma = noise_level * float(np.sqrt(np.mean(clean**2)))
            noise = sigma * rng.standard_normal(len(values))
            snr = float(np.sqrt(np.mean(clean**2) / np.mean(noise**2)))
            values = values + noise
        measurements.append(
            Measurement(
                excitation=exc,
                trace=BoundaryTrace(
                    arclengths=trace.arclengths, values=values, perimeter=trace.perimeter
                ),
                noise_level=noise_level,
                achieved_snr=snr,
            )
        )
    return measurements


def _misfit_of(mesh, spec, measurement):
    ids, arclen, perimeter = mesh.boundary_loop()
    if abs(measurement.trace.perimeter - perimeter) > 1e-8 * perimeter:
        raise SolverError("measurement sampled on a different domain boundary")
    w = mesh.boundary_weights()
    return ids, arclen, w


def _evaluate(dom, poly, spec, measurements, grading, cache, with_gradient):
    mesh = cache.mesh_for(dom, poly, grading)
    total_J = 0.0
    grad = np.zeros((poly.n_vertices, 2)) if with_gradient else None
    ring = None
    for m in measurements:
        u0 = cache.solution_for(mesh, spec, m.excitation)
        ids, arclen, w = _misfit_of(mesh, spec, m)
        d = u0.values[ids] - m.trace.interp(arclen)
        total_J += 0.5 * float(w @ d**2)
        if with_gradient:
            if ring is None:
                ring = interface_ring(mesh, poly)
            w0 = adjoint_state(mesh, spec, u0, m.trace)
            g_m = misfit_gradient(
                poly, spec, interface_traces(u0, ring), interface_traces(w0, ring)
            )
            grad += g_m.vectors
    return total_J, grad


def reconstruct(
    initial: Polygon,
    spec: ConductivitySpec,
    measurements,
    cfg: OptimizerConfig,
    dom: DomainSpec,
    grading: GradingSpec,
) -> Trajectory:
    """Minimize the summed boundary misfit over vertex positions.

    Returns the trajectory with per-iteration records and a status:
    "converged" (gradient below tolerance), "stagnated" (no meaningful
    decrease), "stalled" (no feasible decreasing step), or "max_iterations".
    Every accepted iterate is admissible; every accepted step decreases the
    misfit by at least the Armijo fraction.
    """
    if not measurements:
        raise SolverError("at least one measurement is required")
    report = validate_constraints(initial, cfg.constraints, dom)
    if not report.passed:
        names = ", ".join(c.name for c in report.failures())
        raise GeometryError(f"initial polygon violates constraints: {names}")

    cache = ForwardCache(max_entries=8)
    poly = initial
    records = []
    status = "max_iterations"
    step_cap_base = dom.margin / 4.0
    prev_step = None
    prev_state = None

    J, grad = _evaluate(dom, poly, spec, measurements, grading, cache, True)
    for it in range(cfg.max_iterations):
        grad_norm = float(np.linalg.norm(grad))

        fd_check = None
        if cfg.fd_check_every and it % cfg.fd_check_every == 0 and grad_norm > 0:
            fd_check = _fd_self_check(
                dom, poly, spec, measurements, grading, cache, grad, seed=1000 + it
            )

        if grad_norm <= cfg.grad_tol:
            records.append(
                TrajectoryRecord(it, J, grad_norm, 0.0, False, poly.vertices.copy(), fd_check)
            )
            status = "converged"
            break

        direction = -grad
        max_move = float(np.linalg.norm(direction, axis=1).max())
        # Trial step: spectral (Barzilai-Borwein) when history exists, else the
        # configured or cap-sized step; always capped so no vertex moves more
        # than a quarter margin, with Armijo guarding the descent.
        step_cap = step_cap_base / max_move if max_move > 0 else np.inf
        step = None
        if prev_state is not None:
            dx = poly.vertices - prev_state[0]
            dg = grad - prev_state[1]
            denom = float(np.sum(dx * dg))
            if denom > 0:
                step = float(np.sum(dx * dx)) / denom
        if step is None or not np.isfinite(step) or step <= 0:
            if prev_step is None:
                step = cfg.initial_step if cfg.initial_step is not None else step_cap
            else:
                step = prev_step / cfg.backtrack
        step = min(step, step_cap)
        prev_state = (poly.vertices.copy(), grad.copy())

        accepted = False
        while step > cfg.step_floor:
            try:
                trial = Polygon(poly.vertices + step * direction)
            except GeometryError:
                step *= cfg.backtrack
                continue
            if not validate_constraints(trial, cfg.constraints, dom).passed:
                step *= cfg.backtrack
                continue
            try:
                J_trial, _ = _evaluate(dom, trial, spec, measurements, grading, cache, False)
            except MeshError:
                step *= cfg.backtrack
                continue
            if J_trial <= J - cfg.armijo_c1 * step * grad_norm**2:
                accepted = True
                break
            step *= cfg.backtrack

        records.append(
            TrajectoryRecord(
                it, J, grad_norm, step if accepted else 0.0, accepted, poly.vertices.copy(), fd_check
            )
        )
        if not accepted:
            status = "stalled"
            break

        decrease = J - J_trial
        poly = trial
        prev_step = step
        J, grad = _evaluate(dom, poly, spec, measurements, grading, cache, True)
        if decrease <= cfg.stagnation_tol * max(abs(J), 1e-300):
            records.append(
                TrajectoryRecord(it + 1, J, float(np.linalg.norm(grad)), 0.0, False,
                                 poly.vertices.copy())
            )
            status = "stagnated"
            break
    else:
        records.append(
            TrajectoryRecord(
                cfg.max_iterations, J, float(np.linalg.norm(grad)), 0.0, False,
                poly.vertices.copy()
            )
        )

    return Trajectory(records=records, status=status, final_polygon=poly)


def _fd_self_check(dom, poly, spec, measurements, grading, cache, grad, seed):
    """Relative mismatch of the adjoint gradient against one central-difference
    directional derivative (logged by the optimizer, never asserted)."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=grad.shape)
    d /= np.linalg.norm(d)
    delta = 1e-3 * min(1.0, dom.margin)
    try:
        jp, _ = _evaluate(dom, Polygon(poly.vertices + delta * d), spec, measurements,
                          grading, cache, False)
        jm, _ = _evaluate(dom, Polygon(poly.vertices - delta * d), spec, measurements,
                          grading, cache, False)
    except (GeometryError, MeshError):
        return None
    fd = (jp - jm) / (2 * delta)
    predicted = float(np.sum(grad * d))
    scale = max(abs(fd), abs(predicted), 1e-300)
    return abs(fd - predicted) / scale


def _boundary_samples(poly: Polygon, n: int) -> np.ndarray:
    lengths = poly.edge_lengths()
    per = lengths.sum()
    s = np.linspace(0.0, per, n, endpoint=False)
    cuts = np.concatenate([[0.0], np.cumsum(lengths)])
    edge_of = np.clip(np.searchsorted(cuts, s, side="right") - 1, 0, poly.n_vertices - 1)
    local = (s - cuts[edge_of]) / lengths[edge_of]
    a = poly.vertices[edge_of]
    b = poly.vertices[(edge_of + 1) % poly.n_vertices]
    return a + local[:, None] * (b - a)


def _dist_to_boundary(points: np.ndarray, poly: Polygon) -> np.ndarray:
    d = np.full(len(points), np.inf)
    n = poly.n_vertices
    for i in range(n):
        d = np.minimum(
            d, point_segment_distance(points, poly.vertices[i], poly.vertices[(i + 1) % n])
        )
    return d


def hausdorff_vertex_error(a: Polygon, b: Polygon, samples: int = 4096) -> float:
    """Symmetric Hausdorff distance between the two polygon boundaries
    (vertices plus a dense arclength sampling as candidate points)."""
    pa = np.vstack([a.vertices, _boundary_samples(a, samples)])
    pb = np.vstack([b.vertices, _boundary_samples(b, samples)])
    return float(max(_dist_to_boundary(pa, b).max(), _dist_to_boundary(pb, a).max()))
