import numpy as np
import pytest

from bubblezoom import assembly, q1
from bubblezoom.bubbles import StabCache, physical_tables, pyramid_integral
from bubblezoom.mesh import HORIZONTAL, VERTICAL, build_grid, dof_layout
from bubblezoom.problem import BoundaryData, Coefficients, get_example
from bubblezoom.solve import ConstantTables


def unit_grid(n):
    return build_grid((0.0, 0.0), (1.0, 1.0), (n, n))


class TestGalerkinBlocks:
    def test_nine_point_stiffness_diagonal(self):
        # pure diffusion on N=2: the only interior vertex has diagonal 8/3
        g = unit_grid(2)
        dofs = dof_layout(g, "galerkin")
        A = assembly.assemble_operator(
            g, dofs, Coefficients(1.0, (0.0, 0.0), 0.0)
        )
        d = dofs.vertex_dof[1, 1]
        assert A[d, d] == pytest.approx(8.0 / 3.0, rel=1e-12)

    def test_mass_interior_diagonal(self):
        g = unit_grid(4)
        dofs = dof_layout(g, "galerkin")
        M = assembly.assemble_mass(g, dofs)
        d = dofs.vertex_dof[2, 2]
        h = g.h
        assert M[d, d] == pytest.approx(4.0 * h * h / 9.0, rel=1e-12)

    def test_mass_partition_of_unity(self):
        h = 0.25
        Me = q1.mass_element_matrix(h)
        assert np.allclose(Me.sum(axis=1), h * h / 4.0)
        assert Me.sum() == pytest.approx(h * h)

    def test_translation_invariance(self):
        g = unit_grid(6)
        dofs = dof_layout(g, "galerkin")
        A = assembly.assemble_operator(
            g, dofs, Coefficients(0.01, (1.0, 0.5), 2.0)
        ).toarray()
        # two congruent interior stencils
        rows = []
        for i, j in ((2, 2), (3, 3)):
            d = dofs.vertex_dof[i, j]
            star = [
                dofs.vertex_dof[i + di, j + dj]
                for di in (-1, 0, 1)
                for dj in (-1, 0, 1)
            ]
            rows.append(A[d, star])
        assert np.allclose(rows[0], rows[1], rtol=1e-12)


@pytest.fixture(scope="module")
def ex0_tables():
    e = get_example("example0")
    g = e.grid(10)
    return g, ConstantTables(
        physical_tables(e.coeffs, g.h, 20, StabCache())
    ), e


class TestBubbleBlocks:
    def test_patch_diagonal_is_int_s(self, ex0_tables):
        g, tables, e = ex0_tables
        dofs = dof_layout(g, "bmz")
        A = assembly.assemble_operator(g, dofs, e.coeffs, tables)
        for p in (0, 7, len(g.patches) - 1):
            blk = tables.patch_table(p).patch[g.patches[p].orientation]
            s = dofs.patch_bubble_dof(p)
            assert A[s, s] == pytest.approx(blk.A_ss, rel=1e-12)
            assert A[s, s] == pytest.approx(blk.int_s, rel=1e-12)

    def test_rfb_submatrix_of_bmz(self, ex0_tables):
        g, tables, e = ex0_tables
        dofs_r = dof_layout(g, "rfb")
        dofs_b = dof_layout(g, "bmz")
        Ar = assembly.assemble_operator(g, dofs_r, e.coeffs, tables)
        Ab = assembly.assemble_operator(g, dofs_b, e.coeffs, tables)
        n = dofs_r.total_dofs
        diff = (Ab[:n, :n] - Ar).toarray()
        assert np.max(np.abs(diff)) == 0.0

    def test_mass_rfb_submatrix_of_bmz(self, ex0_tables):
        g, tables, _ = ex0_tables
        n = dof_layout(g, "rfb").total_dofs
        Mr = assembly.assemble_mass(g, dof_layout(g, "rfb"), tables)
        Mb = assembly.assemble_mass(g, dof_layout(g, "bmz"), tables)
        assert np.max(np.abs((Mb[:n, :n] - Mr).toarray())) == 0.0

    def test_missing_tables_rejected(self):
        g = unit_grid(4)
        with pytest.raises(ValueError):
            assembly.assemble_operator(
                g, dof_layout(g, "rfb"), Coefficients(1.0, (1.0, 0.0))
            )


class TestLoadAndDirichlet:
    def test_zero_data_zero_system(self):
        g = unit_grid(5)
        dofs = dof_layout(g, "galerkin")
        coeffs = Coefficients(1.0, (1.0, 0.0), 0.0, source=0.0)
        rhs = assembly.assemble_load(g, dofs, coeffs)
        assert np.all(rhs == 0.0)
        A = assembly.assemble_operator(g, dofs, coeffs)
        system = assembly.apply_dirichlet(A, rhs, g, dofs, BoundaryData(0.0))
        from bubblezoom.linalg import solve

        assert np.allclose(solve(system.A, system.rhs), 0.0)

    def test_dirichlet_rows_are_identity(self):
        g = unit_grid(4)
        dofs = dof_layout(g, "galerkin")
        coeffs = Coefficients(1.0, (1.0, 0.0))
        A = assembly.assemble_operator(g, dofs, coeffs)
        rhs = assembly.assemble_load(g, dofs, coeffs)
        system = assembly.apply_dirichlet(A, rhs, g, dofs, BoundaryData(2.5))
        Ad = system.A.toarray()
        for d in dofs.boundary_dofs:
            row = np.zeros(dofs.total_dofs)
            row[d] = 1.0
            assert np.array_equal(Ad[d], row)
            assert system.rhs[d] == 2.5

    def test_example1_corner_rows(self):
        e = get_example("example1")
        g = e.grid(8)
        dofs = dof_layout(g, "galerkin")
        A = assembly.assemble_operator(g, dofs, e.coeffs)
        rhs = assembly.assemble_load(g, dofs, e.coeffs)
        system = assembly.apply_dirichlet(A, rhs, g, dofs, e.boundary)
        assert system.rhs[dofs.vertex_dof[8, 0]] == 1.0  # (1, 0)
        assert system.rhs[dofs.vertex_dof[8, 8]] == 1.0  # (1, 1): x1=1 wins
        assert system.rhs[dofs.vertex_dof[0, 0]] == 1.0  # (0, 0): x2=0 wins
        assert system.rhs[dofs.vertex_dof[0, 8]] == 0.0  # (0, 1)


class TestSupg:
    def test_classic_tau_value(self):
        # difference of supg and galerkin operators equals the tau-weighted
        # supg element correction with tau = h / (2 |a|)
        g = unit_grid(2)
        coeffs = Coefficients(1e-6, (1.0, 0.0), 0.0)
        dofs = dof_layout(g, "supg")
        A_supg, _ = assembly.assemble_supg(g, dofs, coeffs, "classic")
        A_gal = assembly.assemble_operator(g, dofs, coeffs)
        h = g.h
        tau = h / 2.0
        corr = q1.supg_element_matrix(h, 1.0, 0.0, 0.0, tau)
        vd = assembly._element_vertex_dofs(g, dofs)
        D = (A_supg - A_gal).toarray()
        got = D[np.ix_(vd[0], vd[0])]
        # element 0 contributes alone at its corner vertex
        assert got[0, 0] == pytest.approx(corr[0, 0], rel=1e-12)

    def test_classic_disabled_below_pe_one(self):
        g = unit_grid(4)
        coeffs = Coefficients(1.0, (1.0, 0.0), 0.0)  # Pe_h = 0.25
        dofs = dof_layout(g, "supg")
        A_supg, _ = assembly.assemble_supg(g, dofs, coeffs, "classic")
        A_gal = assembly.assemble_operator(g, dofs, coeffs)
        assert np.max(np.abs((A_supg - A_gal).toarray())) == 0.0

    def test_rfb_integral_tau_matches_pyramid(self):
        # at Pe_h >= 1e3 the rfb-integral tau approaches
        # pyramid_integral(a, h) / h^2
        e = get_example("example0")
        g = e.grid(10)
        tables = ConstantTables(
            physical_tables(e.coeffs, g.h, 20, StabCache())
        )
        tau_rfb = float(tables.element_table(0).int_b.sum()) / (g.h * g.h)
        tau_pyr = pyramid_integral(e.coeffs.velocity, g.h) / (g.h * g.h)
        assert tau_rfb == pytest.approx(tau_pyr, rel=0.10)

    def test_unknown_tau_rule(self):
        g = unit_grid(2)
        with pytest.raises(ValueError):
            assembly.assemble_supg(
                g, dof_layout(g, "supg"),
                Coefficients(1.0, (1.0, 0.0)), "magic",
            )

    def test_zero_velocity_warns_and_falls_back(self):
        g = unit_grid(2)
        coeffs = Coefficients(1.0, (0.0, 0.0), 0.0)
        dofs = dof_layout(g, "supg")
        with pytest.warns(UserWarning):
            A_supg, _ = assembly.assemble_supg(g, dofs, coeffs, "classic")
        A_gal = assembly.assemble_operator(g, dofs, coeffs)
        assert np.max(np.abs((A_supg - A_gal).toarray())) == 0.0


class TestVariableVelocity:
    """Per-element patch assembly for non-constant velocity fields."""

    @staticmethod
    def _rotation():
        return Coefficients(1e-6, lambda x1, x2: (x2 - 0.5, 0.5 - x1), 0.0)

    def test_constant_velocity_element_path_matches_uniform(self):
        # forcing the per-element path on a constant field must reproduce
        # the single-table assembly exactly
        from bubblezoom.solve import VariableTables

        e = get_example("example0")
        g = e.grid(4)
        dofs = dof_layout(g, "bmz")
        cache = StabCache()
        uni = ConstantTables(physical_tables(e.coeffs, g.h, 20, cache))
        wrapped = Coefficients(
            e.coeffs.epsilon,
            lambda x1, x2, a=e.coeffs.velocity: (
                a[0] + 0.0 * np.asarray(x1),
                a[1] + 0.0 * np.asarray(x1),
            ),
            e.coeffs.reaction,
            source=e.coeffs.source,
        )
        var = VariableTables(g, wrapped, 20, cache, patch_velocity="element")
        A_u = assembly.assemble_operator(g, dofs, e.coeffs, tables=uni)
        A_v = assembly.assemble_operator(g, dofs, wrapped, tables=var)
        assert np.max(np.abs((A_u - A_v).toarray())) < 1e-12
        M_u = assembly.assemble_mass(g, dofs, tables=uni)
        M_v = assembly.assemble_mass(g, dofs, tables=var)
        assert np.max(np.abs((M_u - M_v).toarray())) < 1e-12
        r_u = assembly.assemble_load(g, dofs, e.coeffs, tables=uni)
        r_v = assembly.assemble_load(g, dofs, wrapped, tables=var)
        assert np.max(np.abs(r_u - r_v)) < 1e-14

    def test_mass_load_consistency(self):
        # with f = 1 the load vector must equal the mass matrix applied to
        # the all-ones vertex vector, so the discrete growth rate of
        # du/dt = f is exactly the constant 1
        from bubblezoom.solve import make_tables

        coeffs = Coefficients(1e-6, self._rotation().velocity, 0.0, source=1.0)
        g = build_grid((0.0, 0.0), (1.0, 1.0), (6, 6))
        dofs = dof_layout(g, "bmz")
        tables = make_tables(g, coeffs, 20, StabCache())
        M = assembly.assemble_mass(g, dofs, tables=tables)
        F = assembly.assemble_load(g, dofs, coeffs, tables=tables)
        ones = np.zeros(dofs.total_dofs)
        ones[: dofs.n_vertex_dofs] = 1.0
        assert np.max(np.abs(M @ ones - F)) < 1e-14

    def test_mass_positive_semidefinite(self):
        from bubblezoom.solve import make_tables

        coeffs = self._rotation()
        g = build_grid((0.0, 0.0), (1.0, 1.0), (5, 5))
        dofs = dof_layout(g, "bmz")
        tables = make_tables(g, coeffs, 20, StabCache())
        M = assembly.assemble_mass(g, dofs, tables=tables).toarray()
        eigs = np.linalg.eigvalsh(0.5 * (M + M.T))
        assert eigs.min() > -1e-12
