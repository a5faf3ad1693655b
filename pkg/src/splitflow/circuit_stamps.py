"""Per-device linearized stamps for the split-circuit NR system.

Every device contributes first-order Taylor terms of its current
injections (and one control equation per controlled quantity) to a square
sparse system in the direct-solution convention: A(x0) x_new = A(x0) x0 -
F(x0), so the stamped right-hand side already folds in the linearization
point. The same stamp code evaluates the plain nonlinear residual F(x0)
when the assembler runs in residual mode; Jacobian entries are therefore
testable against finite differences of `residual`.

Unknown ordering: interleaved bus voltages (V_real, V_imag per bus), then
one reactive-power column per voltage-controlling device (local
generators, remote members, switched shunts), one group-request column
per remote control group, one ratio column per controlled tap, and the
slack-surplus column when distributed slack is active. Each control
equation lives on the row with the same index as its unknown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

from .case_model import PQ, PV, SLACK, NetworkCase
from .errors import SingularPointError
from .smooth_primitives import (
    DECREASING,
    INCREASING,
    SigmoidSaturation,
    participation_build,
    participation_deriv,
    participation_eval,
    sigmoid_deriv,
    sigmoid_eval,
)

# voltage magnitudes below this are treated as a collapsed (singular) point
EPS_V = 1e-4
# relaxed smoothing never drops below this steepness
STEEPNESS_FLOOR = 10.0
# admittance scale for the virtually-shorted network: 1 + tx_relax * TX_SCALE
TX_SCALE = 1e3
# degenerate-limit threshold: below this range a device is a fixed injection
DEGENERATE_RANGE = 1e-12

SIGMOID = "sigmoid"
FIXED_V = "fixed-v"
FIXED_Q = "fixed-q"

AT_MIN = "at-min"
AT_MAX = "at-max"
CONTROLLING = "controlling"
# fraction of the output range that counts as "at the limit"
REGION_TOL = 0.004


@dataclass
class ControlMode:
    """How device controls are stamped for one solve.

    The default instance is the original problem: full smoothing, exact
    limits, no admittance relaxation. Homotopy drivers and the baseline
    outer loop build variants of this.
    """

    smoothing: float = 5000.0
    smoothing_relax: float = 0.0  # effective steepness = smoothing - relax
    q_scale: dict = field(default_factory=dict)  # device key -> scale >= 1
    q_widen: dict = field(default_factory=dict)  # device key -> (lo, hi) additive
    p_relax: float = 0.0  # 1.0 means purely linear slack participation
    p_extra: dict = field(default_factory=dict)  # gen idx -> (extra_lo, extra_hi)
    tx_relax: float = 0.0
    agc_enabled: bool = False
    device_modes: dict = field(default_factory=dict)  # key -> SIGMOID|FIXED_V|FIXED_Q
    fixed_q: dict = field(default_factory=dict)  # key -> value for FIXED_Q
    group_modes: dict = field(default_factory=dict)  # group idx -> SIGMOID|FIXED_V
    fixed_shunt_b: dict = field(default_factory=dict)  # shunt idx -> susceptance
    fixed_tap_ratio: dict = field(default_factory=dict)  # branch idx -> ratio

    def effective_steepness(self) -> float:
        return max(self.smoothing - self.smoothing_relax, STEEPNESS_FLOOR)

    def relaxed_q_limits(self, key, q_min: float, q_max: float):
        scale = self.q_scale.get(key, 1.0)
        lo, hi = scale * q_min, scale * q_max
        wlo, whi = self.q_widen.get(key, (0.0, 0.0))
        return lo - wlo, hi + whi


def base_control(case: NetworkCase, smoothing: float = 5000.0) -> ControlMode:
    return ControlMode(smoothing=smoothing, agc_enabled=case.agc_enabled)


@dataclass
class IndexMap:
    """Row/column assignment for one case + control configuration."""

    n_bus: int
    bus_pos: dict
    slack_pos: int
    q_col: dict  # ("gen", i) | ("shunt", j) -> column index
    qreq_col: dict  # group index -> column
    tap_col: dict  # branch index -> column
    dps_col: int | None
    dim: int
    member_group: dict  # gen index -> (group index, member position)
    local_gen_idx: list
    agc_member_idx: list
    slack_gen_idx: list
    slack_p_sched: float

    def vr(self, pos: int) -> int:
        return 2 * pos

    def vi(self, pos: int) -> int:
        return 2 * pos + 1

    def voltage_dim(self) -> int:
        return 2 * self.n_bus


def build_index(case: NetworkCase, ctl: ControlMode) -> IndexMap:
    bus_pos = case.bus_index()
    slack_pos = bus_pos[case.slack_bus().id]

    member_group = {}
    for gi, grp in enumerate(case.remote_groups):
        for mpos, gen_i in enumerate(grp.members):
            member_group[gen_i] = (gi, mpos)

    slack_bus_id = case.buses[slack_pos].id
    local_gen_idx = []
    agc_member_idx = []
    slack_gen_idx = []
    for i, g in enumerate(case.generators):
        if g.bus == slack_bus_id:
            slack_gen_idx.append(i)
            continue
        if i not in member_group:
            local_gen_idx.append(i)
        if ctl.agc_enabled and g.agc_factor > 0.0:
            agc_member_idx.append(i)

    col = 2 * len(case.buses)
    q_col = {}
    for i in local_gen_idx:
        q_col[("gen", i)] = col
        col += 1
    for gi, grp in enumerate(case.remote_groups):
        for gen_i in grp.members:
            q_col[("gen", gen_i)] = col
            col += 1
    for j in range(len(case.shunts)):
        if j in ctl.fixed_shunt_b:
            continue  # snapped: stamped as a constant admittance
        q_col[("shunt", j)] = col
        col += 1
    qreq_col = {}
    for gi in range(len(case.remote_groups)):
        qreq_col[gi] = col
        col += 1
    tap_col = {}
    for bi, br in enumerate(case.branches):
        if br.tap is not None and bi not in ctl.fixed_tap_ratio:
            tap_col[bi] = col
            col += 1
    dps_col = None
    if ctl.agc_enabled:
        dps_col = col
        col += 1

    return IndexMap(
        n_bus=len(case.buses),
        bus_pos=bus_pos,
        slack_pos=slack_pos,
        q_col=q_col,
        qreq_col=qreq_col,
        tap_col=tap_col,
        dps_col=dps_col,
        dim=col,
        member_group=member_group,
        local_gen_idx=local_gen_idx,
        agc_member_idx=agc_member_idx,
        slack_gen_idx=slack_gen_idx,
        slack_p_sched=sum(case.generators[i].p_g for i in slack_gen_idx),
    )


class StateVector:
    """Dense unknown vector plus its index map."""

    def __init__(self, index: IndexMap, x: np.ndarray):
        assert len(x) == index.dim
        self.index = index
        self.x = x

    def copy(self) -> "StateVector":
        return StateVector(self.index, self.x.copy())

    def v_complex(self, pos: int) -> complex:
        return complex(self.x[2 * pos], self.x[2 * pos + 1])

    def v_mag(self, pos: int) -> float:
        return abs(self.v_complex(pos))

    def remap(self, new_index: IndexMap) -> "StateVector":
        """Transfer shared unknowns into a differently-shaped state."""
        x = np.zeros(new_index.dim)
        x[: new_index.voltage_dim()] = self.x[: self.index.voltage_dim()]
        for key, c in new_index.q_col.items():
            if key in self.index.q_col:
                x[c] = self.x[self.index.q_col[key]]
        for gi, c in new_index.qreq_col.items():
            if gi in self.index.qreq_col:
                x[c] = self.x[self.index.qreq_col[gi]]
        for bi, c in new_index.tap_col.items():
            if bi in self.index.tap_col:
                x[c] = self.x[self.index.tap_col[bi]]
        if new_index.dps_col is not None and self.index.dps_col is not None:
            x[new_index.dps_col] = self.x[self.index.dps_col]
        return StateVector(new_index, x)


def flat_start(case: NetworkCase, ctl: ControlMode) -> StateVector:
    """Initial state: case voltages, model-consistent control values."""
    index = build_index(case, ctl)
    x = np.zeros(index.dim)
    for pos, bus in enumerate(case.buses):
        x[index.vr(pos)] = bus.v_init_real
        x[index.vi(pos)] = bus.v_init_imag
    steep = ctl.effective_steepness()
    for i in index.local_gen_idx:
        g = case.generators[i]
        lo, hi = ctl.relaxed_q_limits(("gen", i), g.q_min, g.q_max)
        vm = abs(complex(x[index.vr(index.bus_pos[g.bus])],
                         x[index.vi(index.bus_pos[g.bus])]))
        x[index.q_col[("gen", i)]] = sigmoid_eval(
            SigmoidSaturation(lo, hi, g.v_set, steep), vm
        )
    for gi, grp in enumerate(case.remote_groups):
        lo = hi = 0.0
        for m in grp.members:
            g = case.generators[m]
            mlo, mhi = ctl.relaxed_q_limits(("gen", m), g.q_min, g.q_max)
            lo += mlo
            hi += mhi
        pos = index.bus_pos[grp.controlled_bus]
        vm = abs(complex(x[index.vr(pos)], x[index.vi(pos)]))
        if hi - lo < DEGENERATE_RANGE:
            qreq = lo
        else:
            qreq = sigmoid_eval(SigmoidSaturation(lo, hi, grp.v_set, steep), vm)
        x[index.qreq_col[gi]] = qreq
        for m, kappa in zip(grp.members, grp.factors):
            g = case.generators[m]
            mlo, mhi = ctl.relaxed_q_limits(("gen", m), g.q_min, g.q_max)
            if mhi - mlo < DEGENERATE_RANGE:
                x[index.q_col[("gen", m)]] = mlo
            else:
                curve = participation_build(kappa, mlo, mhi)
                x[index.q_col[("gen", m)]] = participation_eval(curve, qreq)
    for j, sh in enumerate(case.shunts):
        key = ("shunt", j)
        if key not in index.q_col:
            continue
        lo, hi = ctl.relaxed_q_limits(key, sh.b_min, sh.b_max)
        pos = index.bus_pos[sh.bus]
        vm = abs(complex(x[index.vr(pos)], x[index.vi(pos)]))
        if hi - lo < DEGENERATE_RANGE:
            x[index.q_col[key]] = lo
        else:
            x[index.q_col[key]] = sigmoid_eval(
                SigmoidSaturation(lo, hi, sh.v_set, steep), vm
            )
    for bi, c in index.tap_col.items():
        tap = case.branches[bi].tap
        ratio = case.branches[bi].ratio
        x[c] = min(max(ratio, tap.tr_min), tap.tr_max)
    if index.dps_col is not None:
        x[index.dps_col] = 0.0
    return StateVector(index, x)


class LinearSystem:
    """Triplet-accumulated sparse system; duplicate entries sum."""

    def __init__(self, dim: int):
        self.dim = dim
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.rhs = np.zeros(dim)

    def add(self, row: int, col: int, val: float):
        self.rows.append(row)
        self.cols.append(col)
        self.vals.append(val)

    def matrix(self) -> csr_matrix:
        return csr_matrix(
            (self.vals, (self.rows, self.cols)), shape=(self.dim, self.dim)
        )


class Assembler:
    """Routes stamp contributions into a LinearSystem and/or residual.

    KCL contributions at the slack bus are either dropped (its rows are
    replaced by voltage constraints) or, with distributed slack active,
    collected so the surplus equation P_S + dP_S = V_S . I_S can be built
    from the implied slack-source currents.
    """

    def __init__(self, case: NetworkCase, state: StateVector, ctl: ControlMode,
                 want_matrix: bool = True):
        self.case = case
        self.state = state
        self.ctl = ctl
        self.index = state.index
        self.x = state.x
        self.want_matrix = want_matrix
        self.sys = LinearSystem(self.index.dim) if want_matrix else None
        self.res = np.zeros(self.index.dim)
        self._collect = ctl.agc_enabled
        self._slack_g = ({}, {})  # col -> d(slack current)/d(col), real/imag
        self._slack_f = [0.0, 0.0]  # slack KCL residual value, real/imag

    # -- equation channel (control rows, slack voltage rows, surplus row)

    def add_eq(self, row: int, col: int, grad: float):
        if self.want_matrix:
            self.sys.add(row, col, grad)
            self.sys.rhs[row] += grad * self.x[col]

    def add_eq_f(self, row: int, f: float):
        if self.want_matrix:
            self.sys.rhs[row] -= f
        self.res[row] += f

    # -- KCL channel (device and branch currents)

    def add_kcl(self, pos: int, comp: int, col: int, grad: float):
        if pos == self.index.slack_pos:
            if self._collect and self.want_matrix:
                g = self._slack_g[comp]
                g[col] = g.get(col, 0.0) + grad
            return
        self.add_eq(2 * pos + comp, col, grad)

    def add_kcl_f(self, pos: int, comp: int, f: float):
        if pos == self.index.slack_pos:
            if self._collect:
                self._slack_f[comp] += f
            return
        self.add_eq_f(2 * pos + comp, f)

    def finalize_slack_surplus(self):
        """Surplus row: P_S + dP_S = V_SR * I_SR + V_SI * I_SI, with the
        slack currents taken from the collected KCL sums."""
        idx = self.index
        if idx.dps_col is None:
            return
        s = idx.slack_pos
        vr_c, vi_c = idx.vr(s), idx.vi(s)
        vr0, vi0 = self.x[vr_c], self.x[vi_c]
        f_r, f_i = self._slack_f
        row = idx.dps_col
        if self.want_matrix:
            for col, g in self._slack_g[0].items():
                self.add_eq(row, col, vr0 * g)
            for col, g in self._slack_g[1].items():
                self.add_eq(row, col, vi0 * g)
            self.add_eq(row, vr_c, f_r)
            self.add_eq(row, vi_c, f_i)
            self.add_eq(row, idx.dps_col, -1.0)
        f = vr0 * f_r + vi0 * f_i - idx.slack_p_sched - self.x[idx.dps_col]
        self.add_eq_f(row, f)


# ---------------------------------------------------------------------------
# Elementary contribution helpers
# ---------------------------------------------------------------------------

def _kcl_admittance(asm: Assembler, at_pos: int, y: complex, v_pos: int):
    """Current y * V(v_pos) entering the KCL sum at at_pos (linear)."""
    g, b = y.real, y.imag
    vr_c = asm.index.vr(v_pos)
    vi_c = asm.index.vi(v_pos)
    vr, vi = asm.x[vr_c], asm.x[vi_c]
    asm.add_kcl(at_pos, 0, vr_c, g)
    asm.add_kcl(at_pos, 0, vi_c, -b)
    asm.add_kcl_f(at_pos, 0, g * vr - b * vi)
    asm.add_kcl(at_pos, 1, vr_c, b)
    asm.add_kcl(at_pos, 1, vi_c, g)
    asm.add_kcl_f(at_pos, 1, b * vr + g * vi)


def _kcl_tap_column(asm: Assembler, at_pos: int, didtau: complex, tau_col: int):
    asm.add_kcl(at_pos, 0, tau_col, didtau.real)
    asm.add_kcl(at_pos, 1, tau_col, didtau.imag)


def _kcl_injection(asm: Assembler, pos: int, p: float, q: float,
                   q_col: int | None = None, p_col: int | None = None,
                   dp_dcol: float = 0.0):
    """Power injection as currents I_R = (p vr + q vi)/|V|^2,
    I_I = (p vi - q vr)/|V|^2, entering KCL with negative sign.

    q_col: column of the reactive-power unknown, when q is one.
    p_col/dp_dcol: chain-rule column for p when it depends on an unknown
    (slack surplus participation).
    """
    idx = asm.index
    vr_c, vi_c = idx.vr(pos), idx.vi(pos)
    vr, vi = asm.x[vr_c], asm.x[vi_c]
    dd = vr * vr + vi * vi
    if dd <= EPS_V * EPS_V:
        bus = asm.case.buses[pos].id
        raise SingularPointError(
            f"voltage magnitude collapsed at bus {bus} (|V|^2 = {dd:.3e})", bus=bus
        )
    ir = (p * vr + q * vi) / dd
    ii = (p * vi - q * vr) / dd
    # injections enter the KCL sum negatively
    asm.add_kcl_f(pos, 0, -ir)
    asm.add_kcl_f(pos, 1, -ii)
    if asm.want_matrix:
        asm.add_kcl(pos, 0, vr_c, -(p / dd - 2.0 * vr * ir / dd))
        asm.add_kcl(pos, 0, vi_c, -(q / dd - 2.0 * vi * ir / dd))
        asm.add_kcl(pos, 1, vr_c, -(-q / dd - 2.0 * vr * ii / dd))
        asm.add_kcl(pos, 1, vi_c, -(p / dd - 2.0 * vi * ii / dd))
        if q_col is not None:
            asm.add_kcl(pos, 0, q_col, -(vi / dd))
            asm.add_kcl(pos, 1, q_col, -(-vr / dd))
        if p_col is not None and dp_dcol != 0.0:
            asm.add_kcl(pos, 0, p_col, -(vr / dd) * dp_dcol)
            asm.add_kcl(pos, 1, p_col, -(vi / dd) * dp_dcol)


def _vmag(asm: Assembler, pos: int):
    vr_c = asm.index.vr(pos)
    vi_c = asm.index.vi(pos)
    vr, vi = asm.x[vr_c], asm.x[vi_c]
    vm = math.hypot(vr, vi)
    if vm <= EPS_V:
        bus = asm.case.buses[pos].id
        raise SingularPointError(
            f"voltage magnitude collapsed at bus {bus} (|V| = {vm:.3e})", bus=bus
        )
    return vr_c, vi_c, vr, vi, vm


def _sigmoid_control_row(asm: Assembler, row: int, value_col: int, pos: int,
                         curve: SigmoidSaturation):
    """Row: value - sigmoid(|V(pos)|) = 0, chain rule through |V|."""
    vr_c, vi_c, vr, vi, vm = _vmag(asm, pos)
    f = asm.x[value_col] - sigmoid_eval(curve, vm)
    asm.add_eq_f(row, f)
    if asm.want_matrix:
        ds = sigmoid_deriv(curve, vm)
        asm.add_eq(row, value_col, 1.0)
        asm.add_eq(row, vr_c, -ds * vr / vm)
        asm.add_eq(row, vi_c, -ds * vi / vm)


def _fixed_v_row(asm: Assembler, row: int, pos: int, v_set: float):
    """Hard voltage-magnitude row: V_R^2 + V_I^2 - V_set^2 = 0."""
    idx = asm.index
    vr_c, vi_c = idx.vr(pos), idx.vi(pos)
    vr, vi = asm.x[vr_c], asm.x[vi_c]
    asm.add_eq_f(row, vr * vr + vi * vi - v_set * v_set)
    if asm.want_matrix:
        asm.add_eq(row, vr_c, 2.0 * vr)
        asm.add_eq(row, vi_c, 2.0 * vi)


def _fixed_q_row(asm: Assembler, row: int, value_col: int, q_fixed: float):
    asm.add_eq_f(row, asm.x[value_col] - q_fixed)
    if asm.want_matrix:
        asm.add_eq(row, value_col, 1.0)


# ---------------------------------------------------------------------------
# Device stamps
# ---------------------------------------------------------------------------

def _branch_admittances(branch, ctl: ControlMode, ratio: float):
    scale = 1.0 + ctl.tx_relax * TX_SCALE
    y = complex(branch.g, branch.b) * scale
    c = complex(0.0, branch.b_sh / 2.0)
    t2 = ratio * ratio
    return (y + c) / t2, -y / ratio, -y / ratio, y + c


def stamp_branch(asm: Assembler, branch, ratio: float | None = None):
    """Pi-model branch with a fixed (possibly off-nominal) turns ratio."""
    idx = asm.index
    f = idx.bus_pos[branch.from_bus]
    t = idx.bus_pos[branch.to_bus]
    yff, yft, ytf, ytt = _branch_admittances(
        branch, asm.ctl, branch.ratio if ratio is None else ratio
    )
    _kcl_admittance(asm, f, yff, f)
    _kcl_admittance(asm, f, yft, t)
    _kcl_admittance(asm, t, ytf, f)
    _kcl_admittance(asm, t, ytt, t)


def stamp_transformer(asm: Assembler, br_idx: int, branch):
    """Branch with a controllable ratio: tapped currents plus the ratio
    control row tr = sigmoid(|V_ctl|)."""
    idx = asm.index
    tau_col = idx.tap_col[br_idx]
    tau = asm.x[tau_col]
    f = idx.bus_pos[branch.from_bus]
    t = idx.bus_pos[branch.to_bus]
    scale = 1.0 + asm.ctl.tx_relax * TX_SCALE
    y = complex(branch.g, branch.b) * scale
    c = complex(0.0, branch.b_sh / 2.0)
    yff = (y + c) / (tau * tau)
    yft = -y / tau
    _kcl_admittance(asm, f, yff, f)
    _kcl_admittance(asm, f, yft, t)
    _kcl_admittance(asm, t, yft, f)
    _kcl_admittance(asm, t, y + c, t)
    if asm.want_matrix:
        vf = complex(asm.x[idx.vr(f)], asm.x[idx.vi(f)])
        vt = complex(asm.x[idx.vr(t)], asm.x[idx.vi(t)])
        dif = -2.0 * (y + c) / tau**3 * vf + y / (tau * tau) * vt
        dit = y / (tau * tau) * vf
        _kcl_tap_column(asm, f, dif, tau_col)
        _kcl_tap_column(asm, t, dit, tau_col)
    tap = branch.tap
    ctl_pos = f if tap.controlled_side == "primary" else t
    key = ("tap", br_idx)
    if asm.ctl.device_modes.get(key) == FIXED_V:
        # limit-free regulation: hold the controlled voltage outright
        _fixed_v_row(asm, tau_col, ctl_pos, tap.v_set)
        return
    orientation = DECREASING if tap.controlled_side == "primary" else INCREASING
    lo, hi = asm.ctl.relaxed_q_limits(key, tap.tr_min, tap.tr_max)
    curve = SigmoidSaturation(
        lo, hi, tap.v_set, asm.ctl.effective_steepness(), orientation
    )
    _sigmoid_control_row(asm, tau_col, tau_col, ctl_pos, curve)


def stamp_load(asm: Assembler, load):
    _kcl_injection(asm, asm.index.bus_pos[load.bus], -load.p, -load.q)


def stamp_fixed_shunt(asm: Assembler, shunt):
    pos = asm.index.bus_pos[shunt.bus]
    _kcl_admittance(asm, pos, complex(shunt.g, shunt.b), pos)


def agc_response(gen, ctl: ControlMode, gen_idx: int, dps: float):
    """Participating generator's extra active power for a given slack
    surplus, with its sensitivity d(dP_G)/d(dP_S).

    At full relaxation (p_relax >= 1) the participation is purely linear;
    below that, limits are the active-power headrooms widened by
    p_relax * extra, where extra comes from the unbounded pre-solve.
    """
    kappa = gen.agc_factor
    if ctl.p_relax >= 1.0:
        return kappa * dps, kappa
    extra_lo, extra_hi = ctl.p_extra.get(gen_idx, (0.0, 0.0))
    lo = (gen.p_min - gen.p_g) + ctl.p_relax * extra_lo
    hi = (gen.p_max - gen.p_g) + ctl.p_relax * extra_hi
    if hi - lo < DEGENERATE_RANGE:
        return 0.0, 0.0
    # active-power spans dwarf typical surpluses, so the default 2% patch
    # would swallow the linear sharing region; use 0.1% here
    curve = participation_build(kappa, lo, hi, delta=0.001 * (hi - lo) / kappa)
    return participation_eval(curve, dps), participation_deriv(curve, dps)


def stamp_agc_member(asm: Assembler, gen_idx: int, gen):
    """Return (p_effective, p_col, dp/dcol) for a generator's injection,
    substituting the slack-surplus participation when active."""
    idx = asm.index
    if gen_idx in idx.agc_member_idx and idx.dps_col is not None:
        dp, ddp = agc_response(gen, asm.ctl, gen_idx, asm.x[idx.dps_col])
        return gen.p_g + dp, idx.dps_col, ddp
    return gen.p_g, None, 0.0


def stamp_generator(asm: Assembler, gen_idx: int, gen):
    """Locally-controlling generator: injection currents plus one control
    row for its reactive-power unknown."""
    idx = asm.index
    key = ("gen", gen_idx)
    q_col = idx.q_col[key]
    pos = idx.bus_pos[gen.bus]
    p_eff, p_col, ddp = stamp_agc_member(asm, gen_idx, gen)
    _kcl_injection(asm, pos, p_eff, asm.x[q_col], q_col=q_col,
                   p_col=p_col, dp_dcol=ddp)
    mode = asm.ctl.device_modes.get(key, SIGMOID)
    if mode == FIXED_V:
        _fixed_v_row(asm, q_col, pos, gen.v_set)
        return
    if mode == FIXED_Q:
        _fixed_q_row(asm, q_col, q_col, asm.ctl.fixed_q[key])
        return
    lo, hi = asm.ctl.relaxed_q_limits(key, gen.q_min, gen.q_max)
    if hi - lo < DEGENERATE_RANGE:
        _fixed_q_row(asm, q_col, q_col, lo)
        return
    curve = SigmoidSaturation(lo, hi, gen.v_set, asm.ctl.effective_steepness())
    _sigmoid_control_row(asm, q_col, q_col, pos, curve)


def stamp_switched_shunt(asm: Assembler, sh_idx: int, shunt):
    """Continuous switched shunt: a local generator with zero active power
    and reactive limits equal to the susceptance limits at nominal voltage."""
    idx = asm.index
    key = ("shunt", sh_idx)
    q_col = idx.q_col[key]
    pos = idx.bus_pos[shunt.bus]
    _kcl_injection(asm, pos, 0.0, asm.x[q_col], q_col=q_col)
    mode = asm.ctl.device_modes.get(key, SIGMOID)
    if mode == FIXED_V:
        _fixed_v_row(asm, q_col, pos, shunt.v_set)
        return
    if mode == FIXED_Q:
        _fixed_q_row(asm, q_col, q_col, asm.ctl.fixed_q[key])
        return
    lo, hi = asm.ctl.relaxed_q_limits(key, shunt.b_min, shunt.b_max)
    if hi - lo < DEGENERATE_RANGE:
        _fixed_q_row(asm, q_col, q_col, lo)
        return
    curve = SigmoidSaturation(lo, hi, shunt.v_set, asm.ctl.effective_steepness())
    _sigmoid_control_row(asm, q_col, q_col, pos, curve)


def stamp_remote_group(asm: Assembler, gi: int, group):
    """Remote voltage control: per-member participation rows driven by the
    shared group request, the group request row tying the request to the
    remote bus voltage, and member injection currents."""
    idx = asm.index
    case = asm.case
    qreq_col = idx.qreq_col[gi]
    qreq = asm.x[qreq_col]
    sum_lo = sum_hi = 0.0
    hard = asm.ctl.group_modes.get(gi, SIGMOID) == FIXED_V

    for gen_i, kappa in zip(group.members, group.factors):
        gen = case.generators[gen_i]
        key = ("gen", gen_i)
        q_col = idx.q_col[key]
        pos = idx.bus_pos[gen.bus]
        p_eff, p_col, ddp = stamp_agc_member(asm, gen_i, gen)
        _kcl_injection(asm, pos, p_eff, asm.x[q_col], q_col=q_col,
                       p_col=p_col, dp_dcol=ddp)
        lo, hi = asm.ctl.relaxed_q_limits(key, gen.q_min, gen.q_max)
        sum_lo += lo
        sum_hi += hi
        if hard:
            # unbounded mode: pure linear split, no flats
            asm.add_eq_f(q_col, asm.x[q_col] - kappa * qreq)
            if asm.want_matrix:
                asm.add_eq(q_col, q_col, 1.0)
                asm.add_eq(q_col, qreq_col, -kappa)
            continue
        if hi - lo < DEGENERATE_RANGE:
            _fixed_q_row(asm, q_col, q_col, lo)
            continue
        curve = participation_build(kappa, lo, hi)
        f = asm.x[q_col] - participation_eval(curve, qreq)
        asm.add_eq_f(q_col, f)
        if asm.want_matrix:
            asm.add_eq(q_col, q_col, 1.0)
            asm.add_eq(q_col, qreq_col, -participation_deriv(curve, qreq))

    rpos = idx.bus_pos[group.controlled_bus]
    if hard:
        _fixed_v_row(asm, qreq_col, rpos, group.v_set)
    elif sum_hi - sum_lo < DEGENERATE_RANGE:
        _fixed_q_row(asm, qreq_col, qreq_col, sum_lo)
    else:
        curve = SigmoidSaturation(
            sum_lo, sum_hi, group.v_set, asm.ctl.effective_steepness()
        )
        _sigmoid_control_row(asm, qreq_col, qreq_col, rpos, curve)


def stamp_slack(asm: Assembler):
    """Replace the slack bus KCL rows by V_R = V_set, V_I = 0; with
    distributed slack also build the surplus power row."""
    idx = asm.index
    case = asm.case
    pos = idx.slack_pos
    bus = case.buses[pos]
    v_set = bus.v_init_real
    for gi in idx.slack_gen_idx:
        v_set = case.generators[gi].v_set
        break
    row_r, row_i = idx.vr(pos), idx.vi(pos)
    asm.add_eq_f(row_r, asm.x[row_r] - v_set)
    asm.add_eq_f(row_i, asm.x[row_i])
    if asm.want_matrix:
        asm.add_eq(row_r, row_r, 1.0)
        asm.add_eq(row_i, row_i, 1.0)
    asm.finalize_slack_surplus()


# ---------------------------------------------------------------------------
# Full-system assembly
# ---------------------------------------------------------------------------

def _stamp_all(asm: Assembler):
    case = asm.case
    idx = asm.index
    for bi, br in enumerate(case.branches):
        if bi in idx.tap_col:
            stamp_transformer(asm, bi, br)
        elif bi in asm.ctl.fixed_tap_ratio:
            stamp_branch(asm, br, ratio=asm.ctl.fixed_tap_ratio[bi])
        else:
            stamp_branch(asm, br)
    for sh in case.fixed_shunts:
        stamp_fixed_shunt(asm, sh)
    for load in case.loads:
        stamp_load(asm, load)
    for i in idx.local_gen_idx:
        stamp_generator(asm, i, case.generators[i])
    for gi, grp in enumerate(case.remote_groups):
        stamp_remote_group(asm, gi, grp)
    for j, sh in enumerate(case.shunts):
        if j in asm.ctl.fixed_shunt_b:
            _kcl_admittance(
                asm,
                idx.bus_pos[sh.bus],
                complex(0.0, asm.ctl.fixed_shunt_b[j]),
                idx.bus_pos[sh.bus],
            )
        else:
            stamp_switched_shunt(asm, j, sh)
    stamp_slack(asm)


def assemble(case: NetworkCase, state: StateVector, ctl: ControlMode) -> LinearSystem:
    """Build the square NR system whose solution is the next iterate."""
    asm = Assembler(case, state, ctl, want_matrix=True)
    _stamp_all(asm)
    return asm.sys


def residual(case: NetworkCase, state: StateVector, ctl: ControlMode) -> np.ndarray:
    """Exact nonlinear residuals F(x) of every equation at the given state."""
    asm = Assembler(case, state, ctl, want_matrix=False)
    _stamp_all(asm)
    return asm.res


# ---------------------------------------------------------------------------
# Operating-region classification
# ---------------------------------------------------------------------------

def _classify(value: float, lo: float, hi: float) -> str:
    span = hi - lo
    if span < DEGENERATE_RANGE:
        return AT_MIN
    if value <= lo + REGION_TOL * span:
        return AT_MIN
    if value >= hi - REGION_TOL * span:
        return AT_MAX
    return CONTROLLING


def classify_regions(case: NetworkCase, state: StateVector, ctl: ControlMode) -> dict:
    """Label every controlled device at-min / controlling / at-max based on
    where its output sits within its (unrelaxed) limits."""
    idx = state.index
    out = {}
    for key, col in idx.q_col.items():
        kind, i = key
        if kind == "gen":
            g = case.generators[i]
            out[key] = _classify(state.x[col], g.q_min, g.q_max)
        else:
            sh = case.shunts[i]
            out[key] = _classify(state.x[col], sh.b_min, sh.b_max)
    for bi, col in idx.tap_col.items():
        tap = case.branches[bi].tap
        out[("tap", bi)] = _classify(state.x[col], tap.tr_min, tap.tr_max)
    if idx.dps_col is not None:
        dps = state.x[idx.dps_col]
        for i in idx.agc_member_idx:
            g = case.generators[i]
            dp, _ = agc_response(g, ctl, i, dps)
            out[("agc", i)] = _classify(dp, g.p_min - g.p_g, g.p_max - g.p_g)
    return out
