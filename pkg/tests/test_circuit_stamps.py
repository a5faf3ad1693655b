from dataclasses import replace

import numpy as np
import pytest

from splitflow import (
    Branch,
    Bus,
    Generator,
    Load,
    NetworkCase,
    SingularPointError,
    SwitchedShunt,
)
from splitflow.case_model import TapControl
from splitflow.circuit_stamps import (
    FIXED_Q,
    FIXED_V,
    Assembler,
    ControlMode,
    StateVector,
    agc_response,
    assemble,
    base_control,
    build_index,
    classify_regions,
    flat_start,
    residual,
    stamp_branch,
    stamp_load,
)
from splitflow.nr_solver import SolverOptions, nr_solve
from tests.conftest import (
    assert_jacobian_matches,
    lossless_agc_case,
    random_state,
    remote_pair_case,
    series_gb,
    shunt_case,
    tapped_case,
    three_bus_pv_case,
    two_bus_case,
)

OPTS = SolverOptions()


class TestBranchStamp:
    def test_hand_expanded_entries(self):
        # series g=1, b=-5: the real KCL row at the from bus carries
        # +g on V_R1, -b on V_I1, -g on V_R2, +b on V_I2
        case = NetworkCase(
            s_base=100.0,
            buses=(Bus(1, 230.0, "slack"), Bus(2, 230.0, "pq")),
            branches=(Branch(1, 2, 1.0, -5.0),),
            generators=(), loads=(Load(2, 0.1, 0.0),),
        )
        ctl = base_control(case)
        state = flat_start(case, ctl)
        asm = Assembler(case, state, ctl, want_matrix=True)
        stamp_branch(asm, case.branches[0])
        A = asm.sys.matrix().toarray()
        idx = state.index
        row = idx.vr(1)  # real KCL at bus 2 (bus 1 rows are slack-replaced)
        assert A[row, idx.vr(1)] == pytest.approx(1.0)
        assert A[row, idx.vi(1)] == pytest.approx(5.0)
        assert A[row, idx.vr(0)] == pytest.approx(-1.0)
        assert A[row, idx.vi(0)] == pytest.approx(-5.0)
        rowi = idx.vi(1)
        assert A[rowi, idx.vr(1)] == pytest.approx(-5.0)
        assert A[rowi, idx.vi(1)] == pytest.approx(1.0)

    def test_zero_charging_adds_no_shunt_term(self):
        g, b = 1.0, -5.0
        case = NetworkCase(
            s_base=100.0,
            buses=(Bus(1, 230.0, "slack"), Bus(2, 230.0, "pq")),
            branches=(Branch(1, 2, g, b, b_sh=0.0),),
            generators=(), loads=(Load(2, 0.1, 0.0),),
        )
        ctl = base_control(case)
        state = flat_start(case, ctl)
        asm = Assembler(case, state, ctl, want_matrix=True)
        stamp_branch(asm, case.branches[0])
        A = asm.sys.matrix().toarray()
        idx = state.index
        # without charging, the cross term V_I2 in the real row at bus 2
        # is exactly -b; charging would shift it
        assert A[idx.vr(1), idx.vi(1)] == pytest.approx(-b)

    def test_fixed_ratio_blocks(self):
        # a fixed-ratio transformer scales the from-side self block by
        # 1/ratio^2 and the transfer blocks by 1/ratio
        ratio = 0.95
        case = NetworkCase(
            s_base=100.0,
            buses=(Bus(1, 230.0, "slack"), Bus(2, 115.0, "pq")),
            branches=(Branch(1, 2, 1.0, -5.0, ratio=ratio),),
            generators=(), loads=(Load(2, 0.1, 0.0),),
        )
        ctl = base_control(case)
        state = flat_start(case, ctl)
        asm = Assembler(case, state, ctl, want_matrix=True)
        stamp_branch(asm, case.branches[0])
        A = asm.sys.matrix().toarray()
        idx = state.index
        assert A[idx.vr(1), idx.vr(1)] == pytest.approx(1.0)
        assert A[idx.vr(1), idx.vr(0)] == pytest.approx(-1.0 / ratio)


class TestLoadStamp:
    def test_zero_load_contributes_nothing(self):
        case = two_bus_case(p_load=0.0, q_load=0.0)
        ctl = base_control(case)
        state = flat_start(case, ctl)
        asm = Assembler(case, state, ctl, want_matrix=True)
        stamp_load(asm, case.loads[0])
        assert all(v == 0.0 for v in asm.sys.vals)
        assert np.all(asm.sys.rhs == 0.0)

    def test_unit_load_partials(self):
        # P=1, Q=0 at V=1+j0: injection I_R = -1 and dI_R/dV_R = +1
        case = two_bus_case(p_load=1.0, q_load=0.0)
        ctl = base_control(case)
        state = flat_start(case, ctl)
        asm = Assembler(case, state, ctl, want_matrix=True)
        stamp_load(asm, case.loads[0])
        A = asm.sys.matrix().toarray()
        idx = state.index
        # KCL subtracts the injection, so the row carries -dI/dV
        assert A[idx.vr(1), idx.vr(1)] == pytest.approx(-1.0)
        assert asm.res[idx.vr(1)] == pytest.approx(1.0)  # -(I_R) = +1

    def test_collapsed_voltage_raises(self):
        case = two_bus_case()
        ctl = base_control(case)
        state = flat_start(case, ctl)
        state.x[state.index.vr(1)] = 1e-5
        state.x[state.index.vi(1)] = 0.0
        with pytest.raises(SingularPointError, match="bus 2"):
            residual(case, state, ctl)


class TestJacobians:
    """Each device type's stamped partials against central differences."""

    def test_branch_and_load(self):
        case = two_bus_case()
        ctl = base_control(case)
        for seed in range(100):
            assert_jacobian_matches(case, random_state(case, ctl, seed), ctl)

    def test_generator_sigmoid(self):
        case = three_bus_pv_case()
        ctl = base_control(case)
        for seed in range(100):
            assert_jacobian_matches(case, random_state(case, ctl, seed), ctl)

    def test_generator_relaxed_limits(self):
        case = three_bus_pv_case()
        ctl = replace(base_control(case), q_scale={("gen", 0): 1.7},
                      q_widen={("gen", 0): (0.05, 0.1)}, smoothing_relax=4900.0)
        for seed in range(40):
            assert_jacobian_matches(case, random_state(case, ctl, seed), ctl)

    def test_generator_hard_rows(self):
        case = three_bus_pv_case()
        for mode, extra in ((FIXED_V, {}), (FIXED_Q, {("gen", 0): 0.25})):
            ctl = replace(base_control(case),
                          device_modes={("gen", 0): mode}, fixed_q=extra)
            for seed in range(25):
                assert_jacobian_matches(case, random_state(case, ctl, seed),
                                        ctl)

    def test_remote_group(self):
        case = remote_pair_case()
        ctl = base_control(case)
        for seed in range(100):
            assert_jacobian_matches(case, random_state(case, ctl, seed), ctl)

    def test_transformer(self):
        for side in ("primary", "secondary"):
            case = tapped_case(controlled_side=side)
            ctl = base_control(case)
            for seed in range(50):
                assert_jacobian_matches(case, random_state(case, ctl, seed),
                                        ctl)

    def test_switched_shunt(self):
        case = shunt_case()
        ctl = base_control(case)
        for seed in range(100):
            assert_jacobian_matches(case, random_state(case, ctl, seed), ctl)

    def test_distributed_slack(self):
        case = lossless_agc_case()
        ctl = base_control(case)
        assert ctl.agc_enabled
        for seed in range(100):
            assert_jacobian_matches(case, random_state(case, ctl, seed), ctl)

    def test_tx_relaxed_network(self):
        case = three_bus_pv_case()
        ctl = replace(base_control(case), tx_relax=0.3, smoothing_relax=4900.0)
        for seed in range(25):
            assert_jacobian_matches(case, random_state(case, ctl, seed), ctl)


class TestTaylorConsistency:
    def test_rhs_encodes_residual(self):
        # direct-solution convention: A(x0) x0 - b(x0) = F(x0)
        for case in (two_bus_case(), three_bus_pv_case(), remote_pair_case(),
                     tapped_case(), shunt_case(), lossless_agc_case()):
            ctl = base_control(case)
            state = random_state(case, ctl, 5)
            sys = assemble(case, state, ctl)
            F = residual(case, state, ctl)
            lhs = sys.matrix() @ state.x - sys.rhs
            assert np.abs(lhs - F).max() < 1e-10


class TestCountingRule:
    def test_two_bus_dimension(self):
        case = two_bus_case()
        idx = build_index(case, base_control(case))
        assert idx.dim == 4

    def test_full_configuration_dimension(self):
        # 1 local PV gen + remote group of 2 + 1 controlled tap + AGC:
        # dim = 2N + (1 + 2) + 1 + 1 + 1
        gt, bt = series_gb(0.002, 0.06)
        case = NetworkCase(
            s_base=100.0,
            buses=(Bus(1, 230.0, "slack"), Bus(2, 230.0, "pv", 1.02),
                   Bus(3, 230.0, "pq"), Bus(4, 230.0, "pq"),
                   Bus(5, 230.0, "pq"), Bus(6, 230.0, "pq")),
            branches=(Branch(1, 5, 1.0, -8.0), Branch(2, 5, 1.0, -8.0),
                      Branch(3, 5, 1.0, -8.0), Branch(4, 5, 1.0, -8.0),
                      Branch(5, 6, gt, bt,
                             tap=TapControl(0.9, 1.1, 1.0, "secondary")),),
            generators=(
                Generator(2, 0.2, 1.02, -1, 1, 0, 1, agc_factor=0.5),
                Generator(3, 0.2, 1.02, -1, 1, 0, 1, remote_bus=5,
                          remote_factor=0.5),
                Generator(4, 0.2, 1.02, -1, 1, 0, 1, remote_bus=5,
                          remote_factor=0.5),
            ),
            loads=(Load(6, 0.5, 0.2),),
            agc_enabled=True,
        )
        n = len(case.buses)
        idx = build_index(case, base_control(case))
        assert idx.dim == 2 * n + 3 + 1 + 1 + 1

    def test_unknowns_equal_equations(self):
        # the assembled matrix is square with a fully structurally
        # nonempty row set for every configuration we bundle
        for case in (two_bus_case(), three_bus_pv_case(), remote_pair_case(),
                     tapped_case(), shunt_case(), lossless_agc_case()):
            ctl = base_control(case)
            state = flat_start(case, ctl)
            sys = assemble(case, state, ctl)
            mat = sys.matrix()
            assert mat.shape == (state.index.dim, state.index.dim)
            assert np.all(np.asarray(abs(mat).sum(axis=1)).ravel() > 0)


class TestStructuralSymmetry:
    def test_bundled_matpower_pattern(self, bundled_matpower):
        # structural symmetry is a property of which entries the stamps
        # write (values may be zero, e.g. a fully saturated sigmoid slope),
        # and the replaced slack voltage rows are exempt
        for name in ("case9", "case14"):
            case = bundled_matpower[name]
            ctl = base_control(case)
            state = random_state(case, ctl, 1)
            sys = assemble(case, state, ctl)
            s = state.index.slack_pos
            skip = {2 * s, 2 * s + 1}
            written = {(r, c) for r, c in zip(sys.rows, sys.cols)
                       if r not in skip and c not in skip}
            missing = {(c, r) for r, c in written} - written
            assert not missing, f"unpaired structural entries: {missing}"


class TestGeneratorBehavior:
    def test_midpoint_at_setpoint_voltage(self):
        # a converged solution with |V| exactly at the setpoint has the
        # reactive output at the middle of its range
        case = three_bus_pv_case()
        ctl = base_control(case)
        state = flat_start(case, ctl)
        idx = state.index
        pos = idx.bus_pos[2]
        state.x[idx.vr(pos)] = 1.02
        state.x[idx.vi(pos)] = 0.0
        state.x[idx.q_col[("gen", 0)]] = 0.0  # midpoint of [-0.4, 0.4]
        F = residual(case, state, ctl)
        assert F[idx.q_col[("gen", 0)]] == pytest.approx(0.0, abs=1e-14)

    def test_default_smoothing_is_5000(self):
        assert ControlMode().smoothing == 5000.0

    def test_stable_region_invariant(self, bundled_matpower):
        # on the continuous model, |V| below setpoint implies output above
        # the midpoint and vice versa: the unstable quadrants cannot occur
        for name, case in bundled_matpower.items():
            ctl = base_control(case)
            state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
            assert rep.converged, name
            for key, col in state.index.q_col.items():
                kind, i = key
                if kind != "gen":
                    continue
                g = case.generators[i]
                mid = 0.5 * (g.q_min + g.q_max)
                vm = state.v_mag(state.index.bus_pos[g.bus])
                if vm < g.v_set - 1e-12:
                    assert state.x[col] > mid
                elif vm > g.v_set + 1e-12:
                    assert state.x[col] < mid

    def test_kcl_at_convergence(self):
        case = three_bus_pv_case()
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        F = residual(case, state, ctl)
        nv = state.index.voltage_dim()
        assert np.abs(F[:nv]).max() < OPTS.tol_residual


class TestSwitchedShuntBehavior:
    def test_degenerate_zero_range_is_noop(self):
        case = shunt_case(b_min=0.0, b_max=0.0)
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        assert state.x[state.index.q_col[("shunt", 0)]] == 0.0

    def test_midpoint_at_setpoint(self):
        case = shunt_case(b_min=0.0, b_max=0.5)
        ctl = base_control(case)
        state = flat_start(case, ctl)
        idx = state.index
        state.x[idx.vr(1)] = 1.0
        state.x[idx.vi(1)] = 0.0
        state.x[idx.q_col[("shunt", 0)]] = 0.25
        F = residual(case, state, ctl)
        assert F[idx.q_col[("shunt", 0)]] == pytest.approx(0.0, abs=1e-14)

    def test_saturated_shunt_raises_voltage(self):
        ctl_off = base_control(shunt_case(b_min=0.0, b_max=0.0))
        case_off = shunt_case(b_min=0.0, b_max=0.0)
        st_off, rep_off = nr_solve(case_off, flat_start(case_off, ctl_off),
                                   ctl_off, OPTS)
        case_on = shunt_case(b_min=0.0, b_max=0.5)
        ctl_on = base_control(case_on)
        st_on, rep_on = nr_solve(case_on, flat_start(case_on, ctl_on),
                                 ctl_on, OPTS)
        assert rep_off.converged and rep_on.converged
        assert st_on.v_mag(1) > st_off.v_mag(1)


class TestRemoteGroup:
    def test_single_member_matches_local_generator(self):
        # a one-member group with factor 1 degenerates to the local PV
        # model: same network, same injection bus, same solution
        from splitflow.case_model import RemoteControlGroup

        base = three_bus_pv_case(q_min=-0.4, q_max=0.4, v_set=1.02)
        local_ctl = base_control(base)
        st_local, rep1 = nr_solve(base, flat_start(base, local_ctl),
                                  local_ctl, OPTS)
        grouped = NetworkCase(
            s_base=100.0,
            buses=(Bus(1, 230.0, "slack", 1.0, 0.0), Bus(2, 230.0, "pq"),
                   Bus(3, 230.0, "pq")),
            branches=base.branches,
            generators=(Generator(2, 0.6, 1.02, -0.4, 0.4, 0.0, 1.0),),
            loads=base.loads,
            remote_groups=(RemoteControlGroup(
                controlled_bus=2, v_set=1.02, members=(0,), factors=(1.0,)),),
        )
        ctl = base_control(grouped)
        st_remote, rep2 = nr_solve(grouped, flat_start(grouped, ctl), ctl,
                                   OPTS)
        assert rep1.converged and rep2.converged
        for pos in range(3):
            assert st_remote.v_mag(pos) == pytest.approx(
                st_local.v_mag(pos), abs=1e-6)
        q_local = st_local.x[st_local.index.q_col[("gen", 0)]]
        q_member = st_remote.x[st_remote.index.q_col[("gen", 0)]]
        assert q_member == pytest.approx(q_local, abs=1e-6)

    def test_kappa_proportional_sharing(self):
        case = remote_pair_case()
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        q1 = state.x[state.index.q_col[("gen", 0)]]
        q2 = state.x[state.index.q_col[("gen", 1)]]
        assert q1 / q2 == pytest.approx(0.6 / 0.4, abs=1e-6)
        qreq = state.x[state.index.qreq_col[0]]
        assert q1 + q2 == pytest.approx(qreq, abs=1e-6)

    def test_all_members_saturated(self):
        # load far beyond the group's combined capability: the request
        # saturates at the summed member maxima and the controlled voltage
        # sags below its setpoint; member limits proportional to the
        # factors saturate every member together
        case = remote_pair_case()
        gens = (
            replace(case.generators[0], q_min=-0.6, q_max=0.6),
            replace(case.generators[1], q_min=-0.4, q_max=0.4),
        )
        case = replace(case, generators=gens, loads=(Load(4, 0.8, 1.8),),
                       remote_groups=())
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        qreq = state.x[state.index.qreq_col[0]]
        assert qreq == pytest.approx(1.0, abs=5e-3)  # sum of member maxima
        assert state.v_mag(3) < 1.03
        q1 = state.x[state.index.q_col[("gen", 0)]]
        q2 = state.x[state.index.q_col[("gen", 1)]]
        assert q1 == pytest.approx(0.6, abs=0.01)
        assert q2 == pytest.approx(0.4, abs=0.01)


class TestDistributedSlack:
    def test_zero_contingency_zero_surplus(self):
        case = lossless_agc_case()
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        assert state.x[state.index.dps_col] == pytest.approx(0.0, abs=1e-9)
        dp, _ = agc_response(case.generators[1], ctl, 1, 0.0)
        assert dp == 0.0

    def test_linear_mode(self):
        gen = Generator(2, 0.5, 1.0, -9, 9, 0.0, 5.0, agc_factor=0.4)
        ctl = replace(ControlMode(), p_relax=1.0)
        for dps in (-2.0, 0.0, 3.0, 50.0):
            dp, ddp = agc_response(gen, ctl, 0, dps)
            assert dp == pytest.approx(0.4 * dps)
            assert ddp == 0.4

    def test_substitution_consistency(self):
        # the participation value recomputed at the converged surplus
        # matches what the currents used, exactly
        case = replace(lossless_agc_case(), loads=(Load(3, 1.4, 0.2),))
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert rep.converged
        dps = state.x[state.index.dps_col]
        dp1, _ = agc_response(case.generators[1], ctl, 1, dps)
        dp2, _ = agc_response(case.generators[1], ctl, 1, dps)
        assert dp1 == dp2

    def test_slack_voltage_pinned(self):
        case = lossless_agc_case()
        ctl = base_control(case)
        state, rep = nr_solve(case, flat_start(case, ctl), ctl, OPTS)
        assert state.v_complex(0) == pytest.approx(1.0 + 0.0j, abs=1e-12)


class TestRegions:
    def test_classification_thresholds(self):
        case = three_bus_pv_case(q_min=-1.0, q_max=1.0)
        ctl = base_control(case)
        state = flat_start(case, ctl)
        col = state.index.q_col[("gen", 0)]
        for q, expect in ((-1.0, "at-min"), (-0.999, "at-min"),
                          (0.0, "controlling"), (0.999, "at-max")):
            state.x[col] = q
            assert classify_regions(case, state, ctl)[("gen", 0)] == expect
