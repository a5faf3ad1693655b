"""Classical discontinuous comparison method.

Generators hold their setpoint through a hard voltage-magnitude row until
the outer loop finds their reactive power beyond a limit, then they are
recast as fixed-Q devices at that limit. One device switches per outer
iteration, processed in a configurable size order; this is exactly the
regime in which switching order changes the converged solution and
limit-straddling devices oscillate between models. A device that toggles
too often is permanently fixed as PQ.

Switched shunts, controlled taps, and remote groups keep their continuous
models here; the hard switching applies to locally-controlling
generators, which is where the pathology lives.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .case_model import NetworkCase
from .circuit_stamps import (
    FIXED_Q,
    FIXED_V,
    ControlMode,
    StateVector,
    base_control,
    flat_start,
)
from .errors import SingularPointError, SingularSystemError
from .nr_solver import SolveReport, SolverOptions, TraceRow, nr_solve

SMALLEST_FIRST = "smallest-first"
LARGEST_FIRST = "largest-first"

# limit-violation slop for switching decisions, per-unit reactive power
SWITCH_TOL = 1e-9

STABLE = "stable"
UNSTABLE = "unstable"


@dataclass
class SwitchEvent:
    outer_iter: int
    gen_index: int
    direction: str  # "pv->pq" or "pq->pv"
    limit: float | None  # Q fixed at this value for pv->pq


@dataclass
class SwitchTrace:
    events: list = field(default_factory=list)
    per_outer: list = field(default_factory=list)  # (pv_to_pq, pq_to_pv, ids)
    fixed_as_pq: set = field(default_factory=set)
    toggles: dict = field(default_factory=dict)

    def total_switches(self) -> int:
        return len(self.events)


@dataclass
class OuterPolicy:
    order: str = SMALLEST_FIRST
    max_switches_per_gen: int = 5
    max_outer_iterations: int = 50

    def __post_init__(self):
        if self.order not in (SMALLEST_FIRST, LARGEST_FIRST):
            raise ValueError(f"unknown switch order {self.order!r}")


def _gen_size(gen) -> float:
    # "size" for ordering purposes: reactive capability range
    return gen.q_max - gen.q_min


def solve_outer_loop(
    case: NetworkCase,
    opts: SolverOptions,
    policy: OuterPolicy | None = None,
    base: ControlMode | None = None,
    init: StateVector | None = None,
) -> tuple[StateVector, SolveReport, SwitchTrace]:
    """Inner NR with hard PV/PQ generator models plus the switching loop.

    Returns the final state, a report whose converged flag requires both
    inner convergence and a settled outer loop, and the switch trace.
    """
    policy = policy if policy is not None else OuterPolicy()
    base = base if base is not None else base_control(case)

    index_probe = flat_start(case, base).index
    local = list(index_probe.local_gen_idx)
    modes = {("gen", i): FIXED_V for i in local}
    fixed_q: dict = {}

    strace = SwitchTrace(toggles={i: 0 for i in local})
    trace_rows: list[TraceRow] = []
    total_inner = 0
    state = init if init is not None else None
    status = "outer-cap-reached"
    outer = 0
    report = None

    for outer in range(1, policy.max_outer_iterations + 1):
        ctl = replace(base, device_modes=dict(modes), fixed_q=dict(fixed_q))
        if state is None:
            state = flat_start(case, ctl)
        try:
            state, report = nr_solve(case, state, ctl, opts,
                                     phase="outer-loop", outer_iter=outer)
        except (SingularSystemError, SingularPointError) as exc:
            report = SolveReport(converged=False, iterations=0,
                                 final_residual=float("inf"),
                                 diagnostics=[f"outer iteration {outer}: {exc}"])
            status = "inner-diverged"
            trace_rows.extend(report.trace)
            break
        total_inner += report.iterations
        trace_rows.extend(report.trace)
        if not report.converged:
            status = "inner-diverged"
            break

        candidates = _switch_candidates(case, state, modes, fixed_q, strace,
                                        policy, local)
        if not candidates:
            status = "settled"
            strace.per_outer.append((0, 0, []))
            break

        reverse = policy.order == LARGEST_FIRST
        candidates.sort(
            key=lambda c: (_gen_size(case.generators[c[0]]), c[0]),
            reverse=reverse,
        )
        gen_i, direction, limit = candidates[0]
        key = ("gen", gen_i)
        strace.toggles[gen_i] += 1
        if direction == "pv->pq":
            modes[key] = FIXED_Q
            fixed_q[key] = limit
            strace.per_outer.append((1, 0, [gen_i]))
        else:
            modes[key] = FIXED_V
            fixed_q.pop(key, None)
            strace.per_outer.append((0, 1, [gen_i]))
        strace.events.append(SwitchEvent(outer, gen_i, direction, limit))
        if trace_rows:
            last = trace_rows[-1]
            if direction == "pv->pq":
                last.pv_to_pq += 1
            else:
                last.pq_to_pv += 1
        if strace.toggles[gen_i] >= policy.max_switches_per_gen:
            # oscillation suppression: lock the generator as PQ for good
            strace.fixed_as_pq.add(gen_i)
            if modes[key] != FIXED_Q:
                g = case.generators[gen_i]
                q = state.x[state.index.q_col[key]]
                limit = g.q_max if q >= 0.5 * (g.q_min + g.q_max) else g.q_min
                modes[key] = FIXED_Q
                fixed_q[key] = limit

    final = SolveReport(
        converged=(status == "settled") and report is not None and report.converged,
        iterations=total_inner,
        final_residual=report.final_residual if report else float("inf"),
        trace=trace_rows,
        device_regions=report.device_regions if report else {},
        outer_iterations=outer,
        diagnostics=[f"outer loop status: {status}"]
        + (report.diagnostics if report else []),
    )
    return state, final, strace


def _switch_candidates(case, state, modes, fixed_q, strace, policy, local):
    """(gen_index, direction, limit) for every switch the rules allow."""
    out = []
    for i in local:
        if i in strace.fixed_as_pq:
            continue
        g = case.generators[i]
        key = ("gen", i)
        col = state.index.q_col[key]
        pos = state.index.bus_pos[g.bus]
        if modes[key] == FIXED_V:
            q = state.x[col]
            if q > g.q_max + SWITCH_TOL:
                out.append((i, "pv->pq", g.q_max))
            elif q < g.q_min - SWITCH_TOL:
                out.append((i, "pv->pq", g.q_min))
        else:
            vm = state.v_mag(pos)
            held = fixed_q[key]
            # recover when the voltage crosses back past the setpoint in
            # the direction the limited device was pushing it
            if held == g.q_max and vm > g.v_set + SWITCH_TOL:
                out.append((i, "pq->pv", None))
            elif held == g.q_min and vm < g.v_set - SWITCH_TOL:
                out.append((i, "pq->pv", None))
    return out


def classify_stability(case: NetworkCase, state: StateVector,
                       at_limit_tol: float = 1e-6) -> dict:
    """Per-generator stable/unstable labels.

    A generator is unstable when it sits at its minimum reactive output
    with the bus voltage below setpoint, or at its maximum with the
    voltage above setpoint; anywhere strictly inside its limits is stable.
    """
    out = {}
    for key, col in state.index.q_col.items():
        kind, i = key
        if kind != "gen":
            continue
        g = case.generators[i]
        q = float(state.x[col])
        # remote controllers are judged at the bus they regulate
        ref_bus = g.remote_bus if g.remote_bus is not None else g.bus
        vm = state.v_mag(state.index.bus_pos[ref_bus])
        unstable = (
            (abs(q - g.q_min) <= at_limit_tol and vm < g.v_set)
            or (abs(q - g.q_max) <= at_limit_tol and vm > g.v_set)
        )
        out[i] = UNSTABLE if unstable else STABLE
    return out
