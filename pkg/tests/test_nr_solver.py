import numpy as np
import pytest

from splitflow import SingularSystemError
from splitflow.circuit_stamps import LinearSystem, base_control, flat_start
from splitflow.nr_solver import (
    SolverOptions,
    nr_solve,
    solve_linear,
    step_limit,
)
from tests.conftest import load_matpower, two_bus_case

OPTS = SolverOptions()


def dense_system(A, b):
    sys = LinearSystem(len(b))
    for r in range(len(b)):
        for c in range(len(b)):
            if A[r][c] != 0.0:
                sys.add(r, c, A[r][c])
    sys.rhs[:] = b
    return sys


class TestSolveLinear:
    def test_identity(self):
        sys = dense_system(np.eye(3), [1.0, 2.0, 3.0])
        assert solve_linear(sys) == pytest.approx([1.0, 2.0, 3.0])

    def test_diagonal(self):
        sys = dense_system([[2.0, 0.0], [0.0, 4.0]], [2.0, 8.0])
        assert solve_linear(sys) == pytest.approx([1.0, 2.0])

    def test_zero_row_names_row(self):
        sys = dense_system([[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0])
        with pytest.raises(SingularSystemError, match="row 1"):
            solve_linear(sys)
        try:
            solve_linear(sys)
        except SingularSystemError as exc:
            assert exc.row == 1

    def test_numerically_singular(self):
        sys = dense_system([[1.0, 1.0], [1.0, 1.0]], [1.0, 2.0])
        with pytest.raises(SingularSystemError):
            solve_linear(sys)

    def test_solution_quality(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(40, 40)) + 40.0 * np.eye(40)
        b = rng.normal(size=40)
        sys = dense_system(A, b)
        x = solve_linear(sys)
        err = np.abs(A @ x - b).max() / max(1.0, np.abs(b).max())
        assert err < 1e-10

    def test_duplicate_triplets_sum(self):
        sys = LinearSystem(1)
        sys.add(0, 0, 1.5)
        sys.add(0, 0, 0.5)
        sys.rhs[0] = 4.0
        assert solve_linear(sys) == pytest.approx([2.0])


class TestStepLimit:
    def _state(self):
        case = two_bus_case()
        return flat_start(case, base_control(case))

    def test_voltage_clamp(self):
        state = self._state()
        dx = np.array([0.5, -0.3, 0.01, 0.02])
        out = step_limit(dx, state, OPTS)
        assert out == pytest.approx([0.1, -0.1, 0.01, 0.02])

    def test_within_limits_unchanged(self):
        state = self._state()
        dx = np.array([0.05, -0.03, 0.09, -0.09])
        assert step_limit(dx, state, OPTS) == pytest.approx(dx)

    def test_sign_preserved(self):
        state = self._state()
        rng = np.random.default_rng(4)
        for _ in range(50):
            dx = rng.normal(scale=2.0, size=4)
            out = step_limit(dx, state, OPTS)
            assert np.all(np.sign(out) == np.sign(dx))
            assert np.all(np.abs(out) <= np.abs(dx) + 1e-15)


class TestNrSolve:
    def test_two_bus_closed_form(self):
        # |V2| from the scalar power-balance quadratic:
        # u^2 + (2 Re(z S*) - 1) u + |z S*|^2 = 0, V2 = conj(z S* + u)
        case = two_bus_case(p_load=0.5, q_load=0.1, r=0.01, x=0.1)
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        z = complex(0.01, 0.1)
        zs = z * complex(0.5, -0.1)
        disc = (2.0 * zs.real - 1.0) ** 2 - 4.0 * abs(zs) ** 2
        u = (1.0 - 2.0 * zs.real + np.sqrt(disc)) / 2.0
        v2 = np.conj(zs + u)
        got = state.v_complex(1)
        assert abs(got - v2) < 1e-8

    def test_zero_load_flat_profile(self):
        case = two_bus_case(p_load=0.0, q_load=0.0)
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        assert rep.iterations <= 2
        assert state.v_complex(1) == pytest.approx(1.0 + 0.0j, abs=1e-10)

    def test_case9_plain_iteration_bound(self, bundled_matpower):
        # continuous models at full smoothing, no homotopy, flat start
        case = bundled_matpower["case9"]
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        assert rep.iterations <= 25

    def test_fixed_point(self):
        case = two_bus_case()
        ctl = base_control(case)
        solved, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        again, rep2 = nr_solve(case, solved, ctl, OPTS)
        assert rep2.converged
        assert rep2.iterations == 1
        assert np.abs(again.x - solved.x).max() < 1e-9

    def test_residual_decreases_near_solution(self, bundled_matpower):
        case = bundled_matpower["case9"]
        ctl = base_control(case)
        _, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        tail = [row.max_residual for row in rep.trace[-3:]]
        assert all(a > b for a, b in zip(tail, tail[1:]))

    def test_trace_completeness(self, bundled_matpower):
        case = bundled_matpower["case14"]
        ctl = base_control(case)
        _, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert len(rep.trace) == rep.iterations
        assert [row.inner_iter for row in rep.trace] == \
            list(range(1, rep.iterations + 1))

    def test_determinism(self, bundled_matpower):
        case = bundled_matpower["case30"]
        ctl = base_control(case)
        s1, r1 = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        s2, r2 = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert np.array_equal(s1.x, s2.x)
        assert [(t.max_residual, t.max_step) for t in r1.trace] == \
            [(t.max_residual, t.max_step) for t in r2.trace]

    def test_non_convergence_is_reported_not_raised(self):
        case = two_bus_case(p_load=5.0, q_load=2.0)  # far past the nose
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert not rep.converged

    def test_max_iter_respected(self, bundled_matpower):
        case = bundled_matpower["case9"]
        ctl = base_control(case)
        opts = SolverOptions(max_iter=3)
        _, rep = nr_solve(case, flat_start(case, ctl), ctl, opts)
        assert rep.iterations <= 3

    def test_options_validation(self):
        with pytest.raises(ValueError):
            SolverOptions(tol_residual=0.0)
        with pytest.raises(ValueError):
            SolverOptions(max_iter=0)
