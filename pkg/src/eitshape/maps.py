"""Discrete Dirichlet-to-Neumann and Neumann-to-Dirichlet operators on a
fixed trigonometric boundary basis, and the scalar boundary functionals.

The basis is mesh-independent (trig modes in the boundary arclength angle) so
operator matrices assembled on different meshes of the same domain can be
compared entrywise — the requirement for operator-level derivative checks
across a family of perturbed inclusions.

The NtD matrix is the Galerkin inverse of the DtN matrix on the mean-zero
("diamond") subspace: with the lumped Gram matrix G of the basis, the operator
acting on coefficients is ``G^{-1} M``, so the bilinear-form matrix of the
inverse map is ``N = G D^{-1} G``.  Composing the two as operators then
reproduces the identity to solver precision on the matched basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import (
    BoundaryData,
    ConductivitySpec,
    Field,
    LinearSystem,
    SolverError,
    assemble,
    boundary_pairing,
    ntd_pairing,
    solve_dirichlet,
    solve_neumann,
)
from .geometry import DomainSpec, Polygon
from .mesh import GradingSpec, Mesh, generate_mesh

__all__ = [
    "BoundaryBasis",
    "OperatorMatrix",
    "dtn_matrix",
    "ntd_matrix",
    "functional_G",
    "ForwardCache",
    "weighted_operator_norm",
]


@dataclass(frozen=True)
class BoundaryBasis:
    """Trig modes on the boundary: the constant (optional) plus cos/sin pairs
    up to ``n_max``.  ``diamond`` restricts to the mean-zero subspace (no
    constant; every member is projected to lumped mean zero when evaluated).
    """

    n_max: int
    diamond: bool = False

    def __post_init__(self):
        if self.n_max < 1:
            raise SolverError("n_max must be >= 1")

    @property
    def modes(self) -> tuple:
        start = () if self.diamond else (0,)
        return start + tuple(range(1, 2 * self.n_max + 1))

    def __len__(self):
        return len(self.modes)

    def members(self, kind: str) -> list:
        return [BoundaryData.trig(kind, idx) for idx in self.modes]

    def values_on(self, mesh: Mesh) -> np.ndarray:
        """Column matrix of basis values on the boundary loop; diamond bases
        are projected to lumped mean zero."""
        ids, arclen, perimeter = mesh.boundary_loop()
        theta = 2.0 * np.pi * arclen / perimeter
        cols = []
        for idx in self.modes:
            if idx == 0:
                col = np.ones_like(theta)
            elif idx % 2 == 1:
                col = np.cos(((idx + 1) // 2) * theta)
            else:
                col = np.sin((idx // 2) * theta)
            cols.append(col)
        B = np.column_stack(cols)
        if self.diamond:
            w = mesh.boundary_weights()
            B = B - w @ B / w.sum()
        return B

    def gram(self, mesh: Mesh) -> np.ndarray:
        """Lumped boundary mass Gram matrix of the basis."""
        B = self.values_on(mesh)
        w = mesh.boundary_weights()
        return (B * w[:, None]).T @ B


@dataclass(frozen=True)
class OperatorMatrix:
    """Bilinear-form matrix of a boundary operator on a BoundaryBasis."""

    matrix: np.ndarray
    tag: str
    basis: BoundaryBasis
    gram: np.ndarray

    def symmetry_error(self) -> float:
        M = self.matrix
        return float(np.abs(M - M.T).max() / max(np.abs(M).max(), 1e-300))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("i,j,value\n")
            for i in range(self.matrix.shape[0]):
                for j in range(self.matrix.shape[1]):
                    fh.write(f"{i},{j},{self.matrix[i, j]:.17g}\n")


def dtn_matrix(
    mesh: Mesh,
    spec: ConductivitySpec,
    basis: BoundaryBasis,
    *,
    system: LinearSystem | None = None,
) -> OperatorMatrix:
    """Entries <Lambda b_j, b_i> via one Dirichlet solve per basis column and
    the variational flux pairing (one factorization, many right-hand sides)."""
    sys_ = system if system is not None else assemble(mesh, spec)
    ids, _, _ = mesh.boundary_loop()
    B = basis.values_on(mesh)
    bnd, interior, lu, A_ib = sys_.dirichlet_factor()
    n = mesh.n_nodes
    m = B.shape[1]
    D = np.empty((m, m))
    for j in range(m):
        u = np.zeros(n)
        u[bnd] = B[:, j]
        if len(interior):
            u[interior] = lu.solve(-(A_ib @ B[:, j]))
        r = sys_.A @ u
        D[:, j] = B.T @ r[ids]
    return OperatorMatrix(matrix=D, tag="dtn", basis=basis, gram=basis.gram(mesh))


def ntd_matrix(
    mesh: Mesh,
    spec: ConductivitySpec,
    basis: BoundaryBasis,
    *,
    system: LinearSystem | None = None,
) -> OperatorMatrix:
    """Galerkin inverse of the DtN matrix on the mean-zero basis."""
    if not basis.diamond:
        raise SolverError("ntd_matrix needs a diamond (mean-zero) basis")
    dtn = dtn_matrix(mesh, spec, basis, system=system)
    G = dtn.gram
    try:
        N = G @ np.linalg.solve(dtn.matrix, G)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"DtN restriction is singular: {exc}") from exc
    return OperatorMatrix(matrix=N, tag="ntd", basis=basis, gram=G)


def weighted_operator_norm(
    M: np.ndarray, G: np.ndarray, tol: float = 1e-6, max_iter: int = 500
) -> float:
    """Spectral norm of the operator whose bilinear form is M, in the G-weighted
    boundary metric (power iteration on G^{-1/2} M G^{-1/2})."""
    evals, vecs = np.linalg.eigh(G)
    if evals.min() <= 0:
        raise SolverError("Gram matrix is not positive definite")
    G_inv_half = vecs @ np.diag(1.0 / np.sqrt(evals)) @ vecs.T
    S = G_inv_half @ M @ G_inv_half
    S = 0.5 * (S + S.T)
    m = S.shape[0]
    v = np.arange(1, m + 1, dtype=float)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = S @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        lam_new = abs(float(v_new @ (S @ v_new)))
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            return lam_new
        lam, v = lam_new, v_new
    return lam


class ForwardCache:
    """Cache of (mesh, systems, solutions) keyed by quantized polygon vertices,
    contrast, grading and boundary data signatures."""

    def __init__(self, max_entries: int = 32):
        self.max_entries = max_entries
        self._store: dict = {}

    @staticmethod
    def poly_key(poly: Polygon | None, quantum: float = 1e-12):
        if poly is None:
            return None
        return np.round(poly.vertices / quantum).astype(np.int64).tobytes()

    def mesh_for(self, dom: DomainSpec, poly: Polygon | None, grading: GradingSpec) -> Mesh:
        key = ("mesh", dom, self.poly_key(poly), grading)
        if key not in self._store:
            self._evict()
            self._store[key] = generate_mesh(dom, poly, grading)
        return self._store[key]

    def system_for(self, mesh: Mesh, spec: ConductivitySpec) -> LinearSystem:
        key = ("system", id(mesh), spec)
        if key not in self._store:
            self._evict()
            self._store[key] = assemble(mesh, spec)
        return self._store[key]

    def solution_for(self, mesh: Mesh, spec: ConductivitySpec, data: BoundaryData) -> Field:
        key = ("solution", id(mesh), spec, data.signature())
        if key not in self._store:
            self._evict()
            system = self.system_for(mesh, spec)
            solver = solve_dirichlet if data.kind == "dirichlet" else solve_neumann
            self._store[key] = solver(mesh, spec, data, system=system)
        return self._store[key]

    def _evict(self):
        while len(self._store) >= self.max_entries * 8:
            self._store.pop(next(iter(self._store)))


def functional_G(
    dom: DomainSpec,
    poly: Polygon | None,
    spec: ConductivitySpec,
    f: BoundaryData,
    g: BoundaryData,
    grading: GradingSpec,
    *,
    cache: ForwardCache | None = None,
    mesh: Mesh | None = None,
) -> float:
    """The scalar boundary functional for inclusion ``poly``.

    For Dirichlet data: the flux pairing <Lambda f, g>.  For Neumann data:
    the voltage pairing <g, N f> of the Neumann solution's trace.  A cache
    (or an explicit mesh, e.g. a morphed one) avoids repeated meshing and
    factorization during sweeps.
    """
    if f.kind != g.kind:
        raise SolverError("f and g must be of the same kind")
    if mesh is None:
        cache = cache if cache is not None else ForwardCache()
        mesh = cache.mesh_for(dom, poly, grading)
    if cache is not None:
        u = cache.solution_for(mesh, spec, f)
    else:
        u = (solve_dirichlet if f.kind == "dirichlet" else solve_neumann)(mesh, spec, f)
    if f.kind == "dirichlet":
        return boundary_pairing(u, g)
    return ntd_pairing(u, g)
