import numpy as np
import pytest

from eitshape.geometry import (
    DomainSpec,
    Polygon,
    VelocityField,
    perturb,
    symmetric_difference_area,
)
from eitshape.mesh import GradingSpec, generate_mesh
from eitshape.fem import (
    BoundaryData,
    ConductivitySpec,
    Field,
    SolverError,
    assemble,
    boundary_pairing,
    solve_dirichlet,
)
from eitshape.maps import BoundaryBasis
from eitshape.verify import (
    StudySetup,
    alessandrini_increment,
    boundary_rate_study,
    default_t_list,
    derivative_rate_study,
    energy_rate_study,
    fd_reference,
    fit_power_law,
    operator_derivative_check,
    singularity_study,
)

SQUARE = DomainSpec(kind="unit_square", margin=0.25)
TRI = Polygon([[-0.3, -0.25], [0.35, -0.15], [0.05, 0.35]])
COARSE = GradingSpec(h=0.1, h_min=0.1 / 8)


def unit_velocity(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3, 2))
    return VelocityField(v / np.linalg.norm(v))


class TestFitter:
    def test_exact_power_laws(self):
        ts = default_t_list()
        for expo, coeff in ((2.0, 3.7), (1.3, 0.21), (0.5, 11.0)):
            fit = fit_power_law(ts, coeff * ts**expo)
            assert fit.slope == pytest.approx(expo, abs=1e-6)
            assert fit.residual < 1e-12

    def test_zero_values_flagged_degenerate(self):
        ts = default_t_list()
        fit = fit_power_law(ts, np.zeros_like(ts))
        assert fit.degenerate
        assert np.isnan(fit.slope)

    def test_floor_discards_noise(self):
        ts = default_t_list()
        clean = 2.0 * ts**2
        noisy = clean + 1e-5
        fit = fit_power_law(ts, noisy, floor=1e-5)
        assert fit.n_used < len(ts)
        assert fit.slope == pytest.approx(2.0, abs=0.1)

    def test_needs_four_samples(self):
        with pytest.raises(SolverError):
            fit_power_law([0.1, 0.05, 0.025], [1, 1, 1])

    def test_csv_output(self, tmp_path):
        ts = default_t_list()
        fit = fit_power_law(ts, ts**2)
        path = tmp_path / "study.csv"
        fit.to_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "t,value"
        assert lines[-2] == "slope,residual,n_used"
        assert len(lines) == len(ts) + 3


class TestDerivativeRate:
    def test_slope_exceeds_one(self):
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(2.0),
            f=BoundaryData.trig("dirichlet", 1),
            g=BoundaryData.trig("dirichlet", 2),
            grading=COARSE,
        )
        fit = derivative_rate_study(setup, unit_velocity(5), default_t_list(6))
        assert not fit.degenerate
        assert fit.slope >= 1.05

    def test_contrast_one_degenerates(self):
        # Without an inclusion the residual is pure remeshing noise; the
        # fresh-mesh floor filter discards it and flags the fit.
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(1.0),
            f=BoundaryData.trig("dirichlet", 1),
            g=BoundaryData.trig("dirichlet", 2),
            grading=COARSE,
            strategy="fresh",
        )
        fit = derivative_rate_study(setup, unit_velocity(5), default_t_list(5))
        assert fit.degenerate
        assert fit.values.max() < 1e-7

    def test_inadmissible_t_skipped_with_warning(self):
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(2.0),
            f=BoundaryData.trig("dirichlet", 1),
            g=BoundaryData.trig("dirichlet", 2),
            grading=COARSE,
        )
        big_v = VelocityField(unit_velocity(5).vectors * 4.0)
        with pytest.warns(UserWarning, match="admissible"):
            fit = derivative_rate_study(
                setup, big_v, [0.1, 0.02, 0.01, 0.005, 0.0025, 0.00125]
            )
        assert len(fit.t) == 5


class TestEnergyRate:
    def test_slope_near_half(self):
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(2.0),
            f=BoundaryData.trig("dirichlet", 1),
            g=BoundaryData.trig("dirichlet", 1),
            grading=COARSE,
        )
        fit = energy_rate_study(setup, unit_velocity(5), default_t_list(5, t_max=0.08))
        assert 0.3 <= fit.slope <= 0.8

    def test_symmetric_difference_scales_linearly(self):
        v = unit_velocity(5)
        ts = default_t_list(6)
        areas = [symmetric_difference_area(TRI, perturb(TRI, v, t)) for t in ts]
        fit = fit_power_law(ts, areas)
        assert fit.slope == pytest.approx(1.0, abs=0.05)


class TestBoundaryRate:
    def test_squared_mismatch_slope(self):
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(2.0),
            f=BoundaryData.trig("neumann", 1),
            g=BoundaryData.trig("neumann", 1),
            grading=COARSE,
        )
        fit = boundary_rate_study(setup, unit_velocity(5), default_t_list(6))
        assert fit.slope >= 1.05

    def test_contrast_one_is_numerically_zero(self):
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(1.0),
            f=BoundaryData.trig("neumann", 1),
            g=BoundaryData.trig("neumann", 1),
            grading=COARSE,
        )
        fit = boundary_rate_study(setup, unit_velocity(5), default_t_list(5))
        assert fit.degenerate or fit.values.max() < 1e-8


class TestOperatorDerivative:
    def test_rate_and_symmetry(self):
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(2.0),
            f=BoundaryData.trig("dirichlet", 1),
            g=BoundaryData.trig("dirichlet", 1),
            grading=COARSE,
        )
        res = operator_derivative_check(
            setup, unit_velocity(5), default_t_list(6), BoundaryBasis(n_max=2, diamond=True)
        )
        assert res.symmetry_error <= 1e-8
        assert res.fit.slope >= 1.05

    def test_contrast_one_gives_zero_operator(self):
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(1.0),
            f=BoundaryData.trig("dirichlet", 1),
            g=BoundaryData.trig("dirichlet", 1),
            grading=COARSE,
        )
        res = operator_derivative_check(
            setup, unit_velocity(5), default_t_list(4), BoundaryBasis(n_max=2, diamond=True)
        )
        assert np.abs(res.derivative_matrix).max() == 0.0


class TestSingularity:
    def test_manufactured_exponent(self):
        # Nodal interpolation of r^0.7 with an angular profile around a vertex:
        # the fitter must recover the exponent.
        mesh = generate_mesh(SQUARE, TRI, GradingSpec(h=0.08, h_min=0.08 / 64, radius=0.3))
        p = TRI.vertices[0]
        d = mesh.nodes - p
        r = np.linalg.norm(d, axis=1)
        ang = np.arctan2(d[:, 1], d[:, 0])
        vals = r**0.7 * (1.0 + 0.2 * np.cos(ang))
        u = Field(mesh=mesh, values=vals)
        fit = singularity_study(mesh, u, TRI, 0)
        assert fit.omega == pytest.approx(0.7, abs=0.05)

    def test_smooth_solution_has_unit_exponent(self):
        mesh = generate_mesh(SQUARE, TRI, GradingSpec(h=0.08, h_min=0.08 / 64, radius=0.3))
        f = BoundaryData.from_callable("dirichlet", mesh, lambda x, y: x)
        u = solve_dirichlet(mesh, ConductivitySpec(1.0), f)
        fit = singularity_study(mesh, u, TRI, 0)
        assert 0.9 <= fit.omega <= 1.1

    def test_insufficient_resolution_reports_required_h(self):
        mesh = generate_mesh(SQUARE, TRI, GradingSpec(h=0.15, h_min=0.15))
        u = Field(mesh=mesh, values=mesh.nodes[:, 0].copy())
        with pytest.raises(SolverError, match="h_min"):
            singularity_study(mesh, u, TRI, 0)


class TestAlessandrini:
    def test_zero_motion_zero_increment(self):
        mesh = generate_mesh(SQUARE, TRI, COARSE)
        f = BoundaryData.trig("dirichlet", 1)
        u = solve_dirichlet(mesh, ConductivitySpec(2.0), f)
        val = alessandrini_increment(mesh, u, u, TRI, TRI, 2.0)
        assert val == 0.0

    def test_contrast_one_zero(self):
        v = unit_velocity(2)
        poly_t = perturb(TRI, v, 0.02)
        mesh = generate_mesh(SQUARE, [TRI, poly_t], COARSE)
        f = BoundaryData.trig("dirichlet", 1)
        u = solve_dirichlet(mesh, ConductivitySpec(1.0), f)
        assert alessandrini_increment(mesh, u, u, TRI, poly_t, 1.0) == 0.0

    def test_identity_with_pairing_difference(self):
        # Discrete identity on a doubly-conforming mesh: the volume form equals
        # the difference of the two boundary pairings of the same solves.
        spec = ConductivitySpec(2.0)
        v = unit_velocity(3)
        t = 0.03
        poly_t = perturb(TRI, v, t)
        mesh = generate_mesh(SQUARE, [TRI, poly_t], COARSE)
        f = BoundaryData.trig("dirichlet", 1)
        g = BoundaryData.trig("dirichlet", 2)
        sys0 = assemble(mesh, spec)
        sys_t = assemble(mesh, spec, region_poly=poly_t)
        u_t = solve_dirichlet(mesh, spec, f, system=sys_t)
        v_0 = solve_dirichlet(mesh, spec, g, system=sys0)
        u_0 = solve_dirichlet(mesh, spec, f, system=sys0)
        increment = alessandrini_increment(mesh, u_t, v_0, TRI, poly_t, spec.contrast)
        pairing_diff = boundary_pairing(u_t, g) - boundary_pairing(u_0, g)
        assert increment == pytest.approx(pairing_diff, rel=1e-9, abs=1e-14)

    def test_requires_doubly_conforming_mesh(self):
        mesh = generate_mesh(SQUARE, TRI, COARSE)
        f = BoundaryData.trig("dirichlet", 1)
        u = solve_dirichlet(mesh, ConductivitySpec(2.0), f)
        poly_t = perturb(TRI, unit_velocity(1), 0.05)
        with pytest.raises(Exception, match="conform"):
            alessandrini_increment(mesh, u, u, TRI, poly_t, 2.0)


class TestFDReference:
    def test_rejects_non_halving_levels(self):
        setup = StudySetup(
            dom=SQUARE,
            poly=TRI,
            spec=ConductivitySpec(2.0),
            f=BoundaryData.trig("dirichlet", 1),
            g=BoundaryData.trig("dirichlet", 2),
            grading=COARSE,
        )
        with pytest.raises(SolverError):
            fd_reference(setup, unit_velocity(0), t_levels=(1e-2, 5e-3, 1e-3))
