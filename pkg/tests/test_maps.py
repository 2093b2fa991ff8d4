import numpy as np
import pytest

from eitshape.geometry import DomainSpec, Polygon, regular_polygon
from eitshape.mesh import GradingSpec, generate_mesh
from eitshape.fem import BoundaryData, ConductivitySpec, SolverError, assemble
from eitshape.maps import (
    BoundaryBasis,
    ForwardCache,
    dtn_matrix,
    functional_G,
    ntd_matrix,
    weighted_operator_norm,
)

SQUARE = DomainSpec(kind="unit_square", margin=0.1)
DISK = DomainSpec(kind="regular_ngon", sides=256, radius=1.0, margin=0.2)
TRI = Polygon([[-0.25, -0.2], [0.3, -0.15], [0.05, 0.3]])


@pytest.fixture(scope="module")
def disk_mesh():
    return generate_mesh(DISK, None, GradingSpec(h=0.04, h_min=0.04))


@pytest.fixture(scope="module")
def square_mesh():
    return generate_mesh(SQUARE, TRI, GradingSpec(h=0.12, h_min=0.12 / 8))


class TestDtn:
    def test_disk_eigenstructure(self, disk_mesh):
        basis = BoundaryBasis(n_max=4)
        D = dtn_matrix(disk_mesh, ConductivitySpec(1.0), basis)
        M = D.matrix
        scale = np.abs(M).max()
        for col, mode in enumerate(basis.modes):
            n = (mode + 1) // 2
            expected = n * np.pi
            if mode == 0:
                assert abs(M[col, col]) < 1e-8 * scale
            else:
                assert M[col, col] == pytest.approx(expected, rel=0.02)
        off = M - np.diag(np.diag(M))
        assert np.abs(off).max() < 0.02 * scale

    def test_symmetry_and_kernel(self, square_mesh):
        basis = BoundaryBasis(n_max=3)
        D = dtn_matrix(square_mesh, ConductivitySpec(2.0), basis)
        assert D.symmetry_error() < 1e-8
        # Constant mode column/row ~ 0 (zero total flux).
        const_col = list(basis.modes).index(0)
        scale = np.abs(D.matrix).max()
        assert np.abs(D.matrix[:, const_col]).max() < 1e-8 * scale
        assert np.abs(D.matrix[const_col, :]).max() < 1e-8 * scale

    def test_contrast_to_one_limit(self, square_mesh):
        basis = BoundaryBasis(n_max=3)
        D1 = dtn_matrix(square_mesh, ConductivitySpec(1.0), basis).matrix
        gaps = []
        for k in (2.0, 1.5, 1.1):
            Dk = dtn_matrix(square_mesh, ConductivitySpec(k), basis).matrix
            gaps.append(np.abs(Dk - D1).max())
        assert gaps[0] > gaps[1] > gaps[2] > 0

    def test_quadratic_form_monotone_in_contrast(self, square_mesh):
        basis = BoundaryBasis(n_max=2)
        D1 = dtn_matrix(square_mesh, ConductivitySpec(1.0), basis).matrix
        D2 = dtn_matrix(square_mesh, ConductivitySpec(3.0), basis).matrix
        for col in range(len(basis)):
            e = np.zeros(len(basis))
            e[col] = 1.0
            assert e @ D2 @ e >= e @ D1 @ e - 1e-8

    def test_csv_dump(self, tmp_path, square_mesh):
        basis = BoundaryBasis(n_max=1)
        D = dtn_matrix(square_mesh, ConductivitySpec(2.0), basis)
        path = tmp_path / "dtn.csv"
        D.to_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "i,j,value"
        assert len(lines) == 1 + len(basis) ** 2
        i, j, v = lines[1].split(",")
        assert (int(i), int(j)) == (0, 0)
        float(v)


class TestNtd:
    def test_disk_inverse_eigenvalues(self, disk_mesh):
        basis = BoundaryBasis(n_max=4, diamond=True)
        N = ntd_matrix(disk_mesh, ConductivitySpec(1.0), basis)
        for col, mode in enumerate(basis.modes):
            n = (mode + 1) // 2
            assert N.matrix[col, col] == pytest.approx(np.pi / n, rel=0.02)

    def test_symmetry(self, square_mesh):
        basis = BoundaryBasis(n_max=3, diamond=True)
        N = ntd_matrix(square_mesh, ConductivitySpec(2.0), basis)
        assert N.symmetry_error() < 1e-8

    def test_composition_is_identity(self, square_mesh):
        basis = BoundaryBasis(n_max=3, diamond=True)
        spec = ConductivitySpec(2.0)
        system = assemble(square_mesh, spec)
        D = dtn_matrix(square_mesh, spec, basis, system=system)
        N = ntd_matrix(square_mesh, spec, basis, system=system)
        G = D.gram
        comp = np.linalg.solve(G, N.matrix) @ np.linalg.solve(G, D.matrix)
        assert np.abs(comp - np.eye(len(basis))).max() < 1e-6

    def test_positive_definite_on_diamond(self, square_mesh):
        basis = BoundaryBasis(n_max=3, diamond=True)
        N = ntd_matrix(square_mesh, ConductivitySpec(2.0), basis)
        evals, vecs = np.linalg.eigh(N.gram)
        gih = vecs @ np.diag(evals**-0.5) @ vecs.T
        S = gih @ N.matrix @ gih
        assert np.linalg.eigvalsh(0.5 * (S + S.T)).min() > 0

    def test_requires_diamond_basis(self, square_mesh):
        with pytest.raises(SolverError):
            ntd_matrix(square_mesh, ConductivitySpec(2.0), BoundaryBasis(n_max=2))


class TestOperatorNorm:
    def test_zero_matrix(self):
        G = np.eye(3)
        assert weighted_operator_norm(np.zeros((3, 3)), G) == 0.0

    def test_against_dense_eigensolve(self, disk_mesh):
        basis = BoundaryBasis(n_max=4, diamond=True)
        D = dtn_matrix(disk_mesh, ConductivitySpec(1.0), basis)
        got = weighted_operator_norm(D.matrix, D.gram)
        evals, vecs = np.linalg.eigh(D.gram)
        gih = vecs @ np.diag(evals**-0.5) @ vecs.T
        S = gih @ D.matrix @ gih
        expected = np.abs(np.linalg.eigvalsh(0.5 * (S + S.T))).max()
        assert got == pytest.approx(expected, rel=1e-5)
        # Unit-disk DtN acts as multiplication by n in the boundary metric.
        assert got == pytest.approx(4.0, rel=0.02)


class TestFunctionalG:
    def test_contrast_one_matches_no_inclusion(self):
        f = BoundaryData.trig("dirichlet", 1)
        g = BoundaryData.trig("dirichlet", 3)
        grading = GradingSpec(h=0.15, h_min=0.15 / 4)
        base = functional_G(SQUARE, None, ConductivitySpec(1.0), f, g, grading)
        with_poly = functional_G(SQUARE, TRI, ConductivitySpec(1.0), f, g, grading)
        assert with_poly == pytest.approx(base, abs=2e-4)

    def test_start_vertex_relabeling_invariance(self):
        f = BoundaryData.trig("dirichlet", 1)
        g = BoundaryData.trig("dirichlet", 2)
        grading = GradingSpec(h=0.15, h_min=0.15 / 4)
        spec = ConductivitySpec(2.0)
        val0 = functional_G(SQUARE, TRI, spec, f, g, grading)
        val1 = functional_G(SQUARE, TRI.roll(1), spec, f, g, grading)
        assert val1 == pytest.approx(val0, abs=1e-10)

    def test_continuity_in_t(self):
        # |G(t) - G(0)| decays roughly linearly in t.
        from eitshape.geometry import VelocityField, perturb

        f = BoundaryData.trig("dirichlet", 1)
        g = BoundaryData.trig("dirichlet", 2)
        grading = GradingSpec(h=0.12, h_min=0.12 / 8)
        spec = ConductivitySpec(2.0)
        cache = ForwardCache()
        v = VelocityField(np.array([[1.0, 0.3], [-0.2, 0.5], [0.4, -0.6]]))
        g0 = functional_G(SQUARE, TRI, spec, f, g, grading, cache=cache)
        ts = np.array([0.08, 0.04, 0.02])
        diffs = np.array(
            [
                abs(
                    functional_G(SQUARE, perturb(TRI, v, t), spec, f, g, grading, cache=cache)
                    - g0
                )
                for t in ts
            ]
        )
        assert np.all(np.diff(diffs) < 0)
        slope = np.polyfit(np.log(ts), np.log(diffs), 1)[0]
        assert 0.7 < slope < 1.3

    def test_kind_mismatch_rejected(self):
        f = BoundaryData.trig("dirichlet", 1)
        g = BoundaryData.trig("neumann", 1)
        with pytest.raises(SolverError):
            functional_G(SQUARE, TRI, ConductivitySpec(2.0), f, g, GradingSpec(h=0.2))
