import numpy as np
import pytest

from eitshape.geometry import DomainSpec, Polygon, regular_polygon
from eitshape.mesh import GradingSpec, Mesh, generate_mesh, interface_ring
from eitshape.fem import (
    BoundaryData,
    BoundaryTrace,
    ConductivitySpec,
    SolverError,
    assemble,
    boundary_l2_diff,
    boundary_pairing,
    gradient_trace,
    h1_seminorm_diff,
    load_field_values,
    project_mean_zero,
    save_field,
    solve_dirichlet,
    solve_neumann,
    triangle_gradients,
)

SQUARE = DomainSpec(kind="unit_square", margin=0.1)
TRI = Polygon([[-0.25, -0.2], [0.3, -0.15], [0.05, 0.3]])
DISK = DomainSpec(kind="regular_ngon", sides=256, radius=1.0, margin=0.2)


@pytest.fixture(scope="module")
def square_mesh():
    return generate_mesh(SQUARE, TRI, GradingSpec(h=0.12, h_min=0.12 / 8))


@pytest.fixture(scope="module")
def disk_mesh():
    inc = regular_polygon(64, 0.5)
    return inc, generate_mesh(DISK, inc, GradingSpec(h=0.04, h_min=0.01, radius=0.05))


def nodal_mass(mesh):
    areas = mesh.triangle_areas()
    m = np.zeros(mesh.n_nodes)
    for c in range(3):
        np.add.at(m, mesh.triangles[:, c], areas / 3)
    return m


class TestAssemble:
    def test_reference_triangle_stiffness(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        mesh = Mesh(
            nodes=nodes,
            triangles=np.array([[0, 1, 2]]),
            region=np.zeros(1, dtype=np.int8),
            boundary_edges=np.array([[0, 1], [1, 2], [2, 0]]),
            boundary_marker=np.arange(3),
            interface_edges=np.empty((0, 2)),
            interface_edge_index=np.empty(0),
            interface_tri_in=np.empty(0),
            interface_tri_out=np.empty(0),
        )
        A = assemble(mesh, ConductivitySpec(1.0)).A.toarray()
        expected = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
        assert np.allclose(A, expected)

    def test_constants_in_kernel(self, square_mesh):
        A = assemble(square_mesh, ConductivitySpec(3.0)).A
        ones = np.ones(square_mesh.n_nodes)
        assert np.abs(A @ ones).max() < 1e-12

    def test_doubling_contrast_doubles_inside_contribution(self, square_mesh):
        A1 = assemble(square_mesh, ConductivitySpec(1.0)).A
        A2 = assemble(square_mesh, ConductivitySpec(2.0)).A
        A4 = assemble(square_mesh, ConductivitySpec(4.0)).A
        # A(k) = A_out + k A_in, so A(4) - A(2) = 2 (A(2) - A(1)).
        d1 = (A2 - A1).toarray()
        d2 = (A4 - A2).toarray()
        assert np.allclose(d2, 2 * d1)


class TestDirichlet:
    def test_constant_data(self, square_mesh):
        f = BoundaryData.from_callable("dirichlet", square_mesh, lambda x, y: 3.5)
        u = solve_dirichlet(square_mesh, ConductivitySpec(2.0), f)
        assert np.allclose(u.values, 3.5, atol=1e-10)

    def test_linear_exact_for_uniform_sigma(self, square_mesh):
        f = BoundaryData.from_callable("dirichlet", square_mesh, lambda x, y: x)
        u = solve_dirichlet(square_mesh, ConductivitySpec(1.0), f)
        assert np.abs(u.values - square_mesh.nodes[:, 0]).max() < 1e-8

    def test_max_principle(self, square_mesh):
        f = BoundaryData.trig("dirichlet", 1)
        for k in (0.5, 2.0, 5.0):
            u = solve_dirichlet(square_mesh, ConductivitySpec(k), f)
            assert u.max_principle_overshoot <= 1e-8

    def test_disk_closed_form(self, disk_mesh):
        # Concentric inclusion of radius rho: interior solution A r cos(theta)
        # with A = 2 / ((1 + k) + (1 - k) rho^2), by separation of variables.
        inc, mesh = disk_mesh
        rho2 = 0.25
        f = BoundaryData.trig("dirichlet", 1)
        for k in (2.0, 0.5):
            u = solve_dirichlet(mesh, ConductivitySpec(k), f)
            A = 2.0 / ((1 + k) + (1 - k) * rho2)
            B = (1 + k) * A / 2
            C = (1 - k) * A * rho2 / 2
            r = np.linalg.norm(mesh.nodes, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                radial = np.where(r <= 0.5, A * r, B * r + C / np.where(r == 0, 1, r))
            exact = radial * np.cos(np.arctan2(mesh.nodes[:, 1], mesh.nodes[:, 0]))
            mass = nodal_mass(mesh)
            err = np.sqrt(mass @ (u.values - exact) ** 2 / (mass @ exact**2))
            assert err < 0.01
            grads = triangle_gradients(mesh, u.values)[mesh.region == 1]
            assert np.abs(grads.mean(axis=0) - [A, 0.0]).max() < 0.01 * A

    def test_wrong_kind_rejected(self, square_mesh):
        g = BoundaryData.trig("neumann", 1)
        with pytest.raises(SolverError):
            solve_dirichlet(square_mesh, ConductivitySpec(2.0), g)


class TestNeumann:
    def test_zero_data_zero_solution(self, square_mesh):
        ids, _, _ = square_mesh.boundary_loop()
        g = BoundaryData.nodal("neumann", square_mesh, np.zeros(len(ids)))
        u = solve_neumann(square_mesh, ConductivitySpec(2.0), g)
        assert np.abs(u.values).max() < 1e-12

    def test_disk_mode(self, disk_mesh):
        # sigma = 1 on the unit disk: flux cos(theta) gives trace cos(theta).
        _, mesh = disk_mesh
        g = BoundaryData.trig("neumann", 1)
        u = solve_neumann(mesh, ConductivitySpec(1.0), g)
        assert np.abs(u.values - mesh.nodes[:, 0]).max() < 0.01

    def test_trace_mean_zero(self, square_mesh):
        g = BoundaryData.trig("neumann", 2)
        u = solve_neumann(square_mesh, ConductivitySpec(2.0), g)
        ids, _, _ = square_mesh.boundary_loop()
        w = square_mesh.boundary_weights()
        assert abs(w @ u.values[ids]) < 1e-8

    def test_incompatible_data_rejected(self, square_mesh):
        ids, _, _ = square_mesh.boundary_loop()
        g = BoundaryData.nodal("neumann", square_mesh, np.ones(len(ids)))
        with pytest.raises(SolverError):
            solve_neumann(square_mesh, ConductivitySpec(2.0), g)

    def test_relabeling_invariance(self, square_mesh):
        # Permuting node ids must not change the solution values at nodes.
        rng = np.random.default_rng(4)
        perm = rng.permutation(square_mesh.n_nodes)
        inv = np.argsort(perm)
        permuted = Mesh(
            nodes=square_mesh.nodes[perm],
            triangles=inv[square_mesh.triangles],
            region=square_mesh.region,
            boundary_edges=inv[square_mesh.boundary_edges],
            boundary_marker=square_mesh.boundary_marker,
            interface_edges=inv[square_mesh.interface_edges],
            interface_edge_index=square_mesh.interface_edge_index,
            interface_tri_in=square_mesh.interface_tri_in,
            interface_tri_out=square_mesh.interface_tri_out,
        )
        spec = ConductivitySpec(2.0)
        g = BoundaryData.trig("neumann", 1)
        u = solve_neumann(square_mesh, spec, g)
        u_perm = solve_neumann(permuted, spec, g)
        assert np.abs(u_perm.values[inv] - u.values).max() < 1e-9


class TestGradientTrace:
    def test_global_linear_field(self, square_mesh):
        f = BoundaryData.from_callable("dirichlet", square_mesh, lambda x, y: x)
        u = solve_dirichlet(square_mesh, ConductivitySpec(1.0), f)
        ring = interface_ring(square_mesh, TRI)
        for side in ("interior", "exterior"):
            tr = gradient_trace(u, ring, side)
            assert np.allclose(tr.vectors, [1.0, 0.0], atol=1e-8)

    def test_transmission_conditions_converge(self):
        # Tangential continuity is exact for P1 (the two sides share the edge
        # nodes); the flux defect is O(h) and shrinks when h does.
        from eitshape.geometry import edge_frames

        spec = ConductivitySpec(2.0)
        f = BoundaryData.trig("dirichlet", 1)
        defects = []
        for h in (0.12, 0.06):
            m = generate_mesh(SQUARE, TRI, GradingSpec(h=h, h_min=h / 8))
            u = solve_dirichlet(m, spec, f)
            ring = interface_ring(m, TRI)
            ge = gradient_trace(u, ring, "exterior").vectors
            gi = gradient_trace(u, ring, "interior").vectors
            tangents, normals, _ = edge_frames(TRI)
            te = tangents[ring.edge_index]
            ne = normals[ring.edge_index]
            tang = np.einsum("ij,ij->i", ge - gi, te)
            assert np.abs(tang).max() < 1e-9
            flux = np.einsum("ij,ij->i", ge, ne) - spec.contrast * np.einsum(
                "ij,ij->i", gi, ne
            )
            w = ring.lengths / ring.lengths.sum()
            defects.append(w @ np.abs(flux))
        assert defects[1] < defects[0] / 1.4


class TestPairing:
    def test_constant_pairing_vanishes(self, square_mesh):
        f = BoundaryData.trig("dirichlet", 1)
        u = solve_dirichlet(square_mesh, ConductivitySpec(2.0), f)
        one = BoundaryData.trig("dirichlet", 0)
        assert abs(boundary_pairing(u, one)) < 1e-10

    def test_dirichlet_energy_nonnegative_and_energy_identity(self, square_mesh):
        spec = ConductivitySpec(2.0)
        sys_ = assemble(square_mesh, spec)
        f = BoundaryData.trig("dirichlet", 2)
        u = solve_dirichlet(square_mesh, spec, f, system=sys_)
        pair = boundary_pairing(u, f)
        assert pair >= 0
        grads = triangle_gradients(square_mesh, u.values)
        energy = float(
            (sys_.sigma * square_mesh.triangle_areas())
            @ np.einsum("ij,ij->i", grads, grads)
        )
        assert pair == pytest.approx(energy, rel=1e-9)

    def test_reciprocity(self, square_mesh):
        spec = ConductivitySpec(3.0)
        sys_ = assemble(square_mesh, spec)
        f = BoundaryData.trig("dirichlet", 1)
        g = BoundaryData.trig("dirichlet", 4)
        uf = solve_dirichlet(square_mesh, spec, f, system=sys_)
        ug = solve_dirichlet(square_mesh, spec, g, system=sys_)
        assert boundary_pairing(uf, g) == pytest.approx(boundary_pairing(ug, f), rel=1e-9)

    def test_extension_independence(self, square_mesh):
        # The pairing only sees boundary rows of A u: the zero-interior and
        # discrete-harmonic extensions of g give the same value.
        spec = ConductivitySpec(2.0)
        sys_ = assemble(square_mesh, spec)
        f = BoundaryData.trig("dirichlet", 1)
        g = BoundaryData.trig("dirichlet", 3)
        u = solve_dirichlet(square_mesh, spec, f, system=sys_)
        ids, _, _ = square_mesh.boundary_loop()
        r = sys_.A @ u.values
        zero_interior = float(r[ids] @ g.boundary_values(square_mesh))
        ug = solve_dirichlet(square_mesh, spec, g, system=sys_)
        harmonic = float(sys_.energy(u.values, ug.values))
        assert zero_interior == pytest.approx(harmonic, rel=1e-9)
        assert boundary_pairing(u, g) == pytest.approx(zero_interior)

    def test_disk_trig_eigenvalues(self, disk_mesh):
        _, mesh = disk_mesh
        spec = ConductivitySpec(1.0)
        sys_ = assemble(mesh, spec)
        for n in (1, 2, 3, 4):
            f = BoundaryData.trig("dirichlet", 2 * n - 1)
            u = solve_dirichlet(mesh, spec, f, system=sys_)
            assert boundary_pairing(u, f) == pytest.approx(n * np.pi, rel=0.02)


class TestNorms:
    def test_identical_fields(self, square_mesh):
        f = BoundaryData.trig("dirichlet", 1)
        u = solve_dirichlet(square_mesh, ConductivitySpec(2.0), f)
        assert h1_seminorm_diff(u, u) == 0.0
        assert boundary_l2_diff(u, u) == 0.0

    def test_linear_fields(self, square_mesh):
        from eitshape.fem import Field

        u = Field(mesh=square_mesh, values=square_mesh.nodes[:, 0].copy())
        v = Field(mesh=square_mesh, values=2.0 * square_mesh.nodes[:, 0])
        # grad difference is (-1, 0) over area 4.
        assert h1_seminorm_diff(u, v) == pytest.approx(2.0, rel=1e-12)

    def test_constant_boundary_offset(self, square_mesh):
        from eitshape.fem import Field

        u = Field(mesh=square_mesh, values=np.zeros(square_mesh.n_nodes))
        v = Field(mesh=square_mesh, values=np.ones(square_mesh.n_nodes))
        assert boundary_l2_diff(u, v) == pytest.approx(np.sqrt(8.0), rel=1e-12)

    def test_cross_mesh_evaluation_converges(self):
        # The same analytic field interpolated on two meshes: the cross-mesh
        # seminorm difference is O(h) and halves with h.
        from eitshape.fem import Field

        fine = generate_mesh(SQUARE, TRI, GradingSpec(h=0.05, h_min=0.05 / 4))

        def interp(mesh):
            x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
            return Field(mesh=mesh, values=np.sin(np.pi * x) * np.cos(np.pi * y))

        uf = interp(fine)
        errs = []
        for h in (0.2, 0.1):
            coarse = generate_mesh(SQUARE, TRI, GradingSpec(h=h, h_min=h / 4))
            errs.append(h1_seminorm_diff(uf, interp(coarse)))
        assert errs[1] < errs[0] / 1.5

    def test_boundary_diff_matches_dense_oracle(self, square_mesh):
        # Cross-mesh traces whose difference is an O(1) smooth function: the
        # lumped quadrature must agree with a 10^4-point sampling oracle.
        from eitshape.fem import Field

        fine = generate_mesh(SQUARE, TRI, GradingSpec(h=0.04, h_min=0.04))

        def trace_field(mesh, fn):
            ids, arclen, per = mesh.boundary_loop()
            vals = np.zeros(mesh.n_nodes)
            vals[ids] = fn(2 * np.pi * arclen / per)
            return Field(mesh=mesh, values=vals)

        u = trace_field(square_mesh, np.sin)
        v = trace_field(fine, lambda t: 0.3 * np.cos(2 * t))
        got = boundary_l2_diff(u, v)
        s = np.linspace(0, 8.0, 10_000, endpoint=False)
        du = BoundaryTrace.from_field(u).interp(s) - BoundaryTrace.from_field(v).interp(s)
        oracle = np.sqrt((du**2).mean() * 8.0)
        assert got == pytest.approx(oracle, rel=1e-3)


class TestFieldIO:
    def test_round_trip(self, tmp_path, square_mesh):
        f = BoundaryData.trig("dirichlet", 1)
        u = solve_dirichlet(square_mesh, ConductivitySpec(2.0), f)
        path = tmp_path / "field.txt"
        save_field(u, path)
        vals = load_field_values(path)
        assert np.array_equal(vals, u.values)
        assert path.read_text().startswith(f"FIELD {square_mesh.n_nodes}\n")


class TestProjection:
    def test_mean_zero(self):
        rng = np.random.default_rng(0)
        w = rng.uniform(0.5, 1.5, size=40)
        v = rng.normal(size=40)
        p = project_mean_zero(v, w)
        assert abs(w @ p) < 1e-12
        assert abs(w @ (v - p) / w.sum() - w @ v / w.sum()) < 1e-12
