import numpy as np
import pytest

from gridforge.lmi import (
    NSD,
    PSD,
    LmiBlock,
    LmiProgram,
    SolverOptions,
    general_eig,
    solve,
    sym_eig,
)


def scalar_block(constant, coeff, **kw):
    return LmiBlock(np.array([[float(constant)]]), (np.array([[float(coeff)]]),), **kw)


class TestSymEig:
    def test_identity(self):
        w, v = sym_eig(np.eye(3))
        np.testing.assert_allclose(w, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(v @ v.T, np.eye(3), atol=1e-14)

    def test_swap_matrix(self):
        w, _ = sym_eig(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(w, [-1.0, 1.0], atol=1e-15)

    def test_reconstruction_bound(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            a = rng.standard_normal((6, 6)) * 10.0 ** rng.integers(-3, 4)
            a = a + a.T
            w, v = sym_eig(a)
            err = np.linalg.norm(a - v @ np.diag(w) @ v.T)
            assert err <= 1e-10 * (1.0 + np.linalg.norm(a))
            assert np.all(np.diff(w) >= 0.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            sym_eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))


class TestGeneralEig:
    def test_companion_spectrum(self):
        # characteristic polynomial (s+1)(s+2)(s+3)
        c = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-6.0, -11.0, -6.0]])
        w = np.sort_complex(general_eig(c))
        np.testing.assert_allclose(w, [-3.0, -2.0, -1.0], atol=1e-12)

    def test_rotation(self):
        w = general_eig(np.array([[0.0, -1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(sorted(w.imag), [-1.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(w.real, 0.0, atol=1e-15)

    def test_char_poly_residual(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((6, 6))
        for lam in general_eig(a):
            res = abs(np.linalg.det(a - lam * np.eye(6)))
            assert res <= 1e-6 * (1.0 + np.linalg.norm(a)) ** 6


class TestProgramValidation:
    def test_objective_length(self):
        with pytest.raises(ValueError, match="objective length"):
            LmiProgram(2, [1.0], (scalar_block(0.0, 1.0),))

    def test_coeff_count(self):
        with pytest.raises(ValueError, match="expected 2"):
            LmiProgram(2, [1.0, 0.0], (scalar_block(0.0, 1.0),))

    def test_asymmetric_matrix(self):
        bad = np.array([[0.0, 1.0], [0.0, 0.0]])
        with pytest.raises(ValueError, match="not symmetric"):
            LmiBlock(bad, (np.eye(2),))

    def test_bad_sense(self):
        with pytest.raises(ValueError, match="sense"):
            scalar_block(0.0, 1.0, sense="psd")


class TestSolveAnalytic:
    def test_scalar_boundary(self):
        sol = solve(LmiProgram(1, [1.0], (scalar_block(0.0, 1.0),)))
        assert sol.status == "Optimal"
        assert abs(sol.x[0]) < 1e-7

    def test_interval_feasibility(self):
        block = LmiBlock(np.diag([0.0, 1.0]), (np.diag([1.0, -1.0]),))
        sol = solve(LmiProgram(1, [0.0], (block,)))
        assert sol.status == "Optimal"
        assert -1e-8 <= sol.x[0] <= 1.0 + 1e-8
        assert np.all(sol.margins >= 0.0)

    def test_absolute_value(self):
        a = -2.31
        block = LmiBlock(np.array([[0.0, a], [a, 0.0]]), (np.eye(2),))
        sol = solve(LmiProgram(1, [1.0], (block,)))
        assert sol.status == "Optimal"
        assert abs(sol.x[0] - abs(a)) < 1e-6

    def test_largest_eigenvalue(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((4, 4))
        a = a + a.T
        sol = solve(LmiProgram(1, [1.0], (LmiBlock(-a, (np.eye(4),)),)))
        assert sol.status == "Optimal"
        assert abs(sol.x[0] - np.linalg.eigvalsh(a)[-1]) < 1e-6

    def test_euclidean_norm(self):
        v = np.array([0.3, -1.2, 2.0])
        c = np.zeros((4, 4))
        c[0, 1:] = v
        c[1:, 0] = v
        sol = solve(LmiProgram(1, [1.0], (LmiBlock(c, (np.eye(4),)),)))
        assert sol.status == "Optimal"
        assert abs(sol.x[0] - np.linalg.norm(v)) < 1e-6

    def test_hyperbola_corner(self):
        # min x+y s.t. [[x,1],[1,y]] psd: xy >= 1, optimum at x=y=1
        coeff_x = np.array([[1.0, 0.0], [0.0, 0.0]])
        coeff_y = np.array([[0.0, 0.0], [0.0, 1.0]])
        block = LmiBlock(np.array([[0.0, 1.0], [1.0, 0.0]]), (coeff_x, coeff_y))
        sol = solve(LmiProgram(2, [1.0, 1.0], (block,)))
        assert sol.status == "Optimal"
        assert abs(sol.objective_value - 2.0) < 1e-6

    def test_nsd_sense(self):
        sol = solve(LmiProgram(1, [-1.0], (scalar_block(0.0, 1.0, sense=NSD),)))
        assert sol.status == "Optimal"
        assert abs(sol.x[0]) < 1e-7


class TestStatuses:
    def test_contradictory_pair_is_infeasible(self):
        prog = LmiProgram(
            1, [0.0], (scalar_block(0.0, 1.0), scalar_block(-1.0, -1.0))
        )
        assert solve(prog).status == "Infeasible"

    def test_fixed_negative_diagonal_is_infeasible(self):
        # the variable only touches the second diagonal entry
        block = LmiBlock(
            np.diag([-1e-3, 0.0]), (np.diag([0.0, 1.0]),)
        )
        assert solve(LmiProgram(1, [0.0], (block,))).status == "Infeasible"

    def test_budget_exhaustion_is_not_infeasible(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((4, 4))
        a = a + a.T
        prog = LmiProgram(1, [1.0], (LmiBlock(-a, (np.eye(4),)),))
        for budget in (1, 2, 5, 20):
            sol = solve(prog, SolverOptions(max_iter=budget))
            assert sol.status in ("NumericalFailure", "Feasible", "Optimal")
            if sol.status != "NumericalFailure":
                # an early stop may skip optimality but never feasibility
                assert sol.margins[0] >= -2e-9

    def test_strict_margin(self):
        sol = solve(LmiProgram(1, [1.0], (scalar_block(0.0, 1.0, strict=True),)))
        assert sol.status == "Optimal"
        assert sol.margins[0] >= 1e-6
        assert sol.x[0] >= 1e-6


class TestSolverInvariants:
    def prog(self):
        v = np.array([0.3, -1.2, 2.0])
        c = np.zeros((4, 4))
        c[0, 1:] = v
        c[1:, 0] = v
        return LmiProgram(
            1, [1.0], (LmiBlock(c, (np.eye(4),)), scalar_block(0.0, 1.0))
        )

    def test_deterministic(self):
        a = solve(self.prog())
        b = solve(self.prog())
        assert a.status == b.status
        np.testing.assert_array_equal(a.x, b.x)
        assert a.objective_value == b.objective_value
        np.testing.assert_array_equal(a.margins, b.margins)

    def test_margins_reverify_via_sym_eig(self):
        prog = self.prog()
        sol = solve(prog)
        for block, margin in zip(prog.blocks, sol.margins):
            sign = 1.0 if block.sense == PSD else -1.0
            scale = 1.0 / (1.0 + np.linalg.norm(block.constant))
            slack = block.constant.copy()
            for xi, f in zip(sol.x, block.coeffs):
                slack = slack + xi * f
            w, _ = sym_eig(sign * scale * slack)
            assert abs(w[0] - margin) <= 1e-9

    def test_merit_decreases_within_each_centering(self):
        sol = solve(self.prog())
        assert sol.iterations
        last = {}
        for it in sol.iterations:
            key = (it.phase, it.t)
            if key in last:
                assert it.merit <= last[key] + 1e-9 * (1.0 + abs(last[key]))
            last[key] = it.merit

    def test_solution_is_immutable_enough(self):
        prog = self.prog()
        sol = solve(prog)
        assert sol.objective_value == pytest.approx(sol.x[0] * 1.0)
