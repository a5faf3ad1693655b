"""Newton-Raphson inner loop: assemble, sparse-solve, damp, iterate.

Convergence requires both the KCL/control residual and the step to fall
below tolerance: near-saturated sigmoid plateaus can make steps tiny
while the network equations are still violated, so the residual is the
ground truth and the step alone is never trusted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import splu

from .case_model import NetworkCase
from .circuit_stamps import (
    Assembler,
    ControlMode,
    LinearSystem,
    StateVector,
    assemble,
    classify_regions,
    residual,
)
from .errors import SingularPointError, SingularSystemError

# taps are clamped at this floor if an update drives the ratio negative
TAP_FLOOR = 1e-6


@dataclass
class SolverOptions:
    tol_residual: float = 1e-6
    tol_step: float = 1e-6
    max_iter: int = 100
    step_limit_voltage: float = 0.1
    step_limit_q: float = 1.0
    damping: str = "step-clamp"  # or "none"

    def __post_init__(self):
        if self.tol_residual <= 0 or self.tol_step <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class TraceRow:
    """One NR iteration in the solver trace (CSV-ready)."""

    phase: str
    outer_iter: int
    inner_iter: int
    lambda_s: float
    lambda_g_max: float
    lambda_p: float
    lambda_tx: float
    max_residual: float
    max_step: float
    pv_to_pq: int = 0
    pq_to_pv: int = 0


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    final_residual: float
    trace: list = field(default_factory=list)
    device_regions: dict = field(default_factory=dict)
    outer_iterations: int = 0
    diagnostics: list = field(default_factory=list)


def solve_linear(sys: LinearSystem) -> np.ndarray:
    """Direct sparse LU solve of the assembled system.

    Raises SingularSystemError carrying a suspect row index when the
    factorization fails or the solution does not satisfy the system.
    """
    mat = sys.matrix().tocsc()
    if not np.all(np.isfinite(mat.data)) or not np.all(np.isfinite(sys.rhs)):
        raise SingularSystemError("non-finite entries in assembled system")
    row_mass = np.asarray(abs(mat).sum(axis=1)).ravel()
    empty = np.where(row_mass == 0.0)[0]
    if empty.size:
        raise SingularSystemError(
            f"structurally singular system: row {int(empty[0])} is empty",
            row=int(empty[0]),
        )
    try:
        lu = splu(mat)
        x = lu.solve(sys.rhs)
    except RuntimeError as exc:
        raise SingularSystemError(f"sparse LU factorization failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("linear solve produced non-finite values")
    err = np.abs(mat @ x - sys.rhs).max() / max(1.0, np.abs(sys.rhs).max())
    if err > 1e-8:
        raise SingularSystemError(
            f"near-singular system: relative solve error {err:.3e}"
        )
    return x


def step_limit(dx: np.ndarray, state: StateVector, opts: SolverOptions) -> np.ndarray:
    """Per-variable clamp: voltages move at most step_limit_voltage per
    iteration, all other unknowns at most step_limit_q. Signs preserved."""
    nv = state.index.voltage_dim()
    out = dx.copy()
    np.clip(out[:nv], -opts.step_limit_voltage, opts.step_limit_voltage, out=out[:nv])
    np.clip(out[nv:], -opts.step_limit_q, opts.step_limit_q, out=out[nv:])
    return out


def _trace_lambdas(ctl: ControlMode):
    lg = max(ctl.q_scale.values()) if ctl.q_scale else 1.0
    return ctl.smoothing_relax, lg, ctl.p_relax, ctl.tx_relax


def _residual_norm(case, state, ctl) -> float:
    try:
        return float(np.abs(residual(case, state, ctl)).max())
    except SingularPointError:
        return float("inf")


def nr_solve(case: NetworkCase, init: StateVector, ctl: ControlMode,
             opts: SolverOptions, phase: str = "solve",
             outer_iter: int = 0) -> tuple[StateVector, SolveReport]:
    """Iterate until residual and step are both below tolerance, or
    max_iter is reached. Non-convergence is reported, not raised;
    singular systems raise SingularSystemError with the iteration.

    With step-clamp damping the per-variable-clamped Newton step is
    additionally backtracked (halving, floor 1/64) until the residual
    norm decreases; without the guard, steep saturation curves settle
    into period-2 limit cycles instead of converging.
    """
    state = init.copy()
    lam_s, lam_g, lam_p, lam_tx = _trace_lambdas(ctl)
    trace: list[TraceRow] = []
    diagnostics: list[str] = []
    converged = False
    it = 0
    max_res = _residual_norm(case, state, ctl)
    for it in range(1, opts.max_iter + 1):
        sys = assemble(case, state, ctl)
        try:
            x_new = solve_linear(sys)
        except SingularSystemError as exc:
            exc.iteration = it
            raise
        dx = x_new - state.x
        if opts.damping == "step-clamp":
            dx = step_limit(dx, state, opts)
            alpha, best_x, best_res, best_alpha = 1.0, None, float("inf"), 0.0
            while alpha >= 1.0 / 64.0:
                trial = StateVector(state.index, state.x + alpha * dx)
                r = _residual_norm(case, trial, ctl)
                if r < best_res:
                    best_x, best_res, best_alpha = trial.x, r, alpha
                if r < max_res:
                    break
                alpha /= 2.0
            if best_x is None:
                max_res = float("inf")
                trace.append(TraceRow(phase, outer_iter, it, lam_s, lam_g,
                                      lam_p, lam_tx, max_res, 0.0))
                break
            dx = best_alpha * dx
            state.x = best_x
            max_res = best_res
        else:
            state.x = state.x + dx
            max_res = _residual_norm(case, state, ctl)
        for bi, col in state.index.tap_col.items():
            if state.x[col] < TAP_FLOOR:
                diagnostics.append(
                    f"iteration {it}: tap on branch {bi} clamped at {TAP_FLOOR}"
                )
                state.x[col] = TAP_FLOOR
        max_step = float(np.abs(dx).max())
        trace.append(TraceRow(phase, outer_iter, it, lam_s, lam_g, lam_p,
                              lam_tx, max_res, max_step))
        if not np.isfinite(max_res):
            break
        if max_res < opts.tol_residual and max_step < opts.tol_step:
            converged = True
            break
    report = SolveReport(
        converged=converged,
        iterations=it,
        final_residual=max_res,
        trace=trace,
        device_regions=classify_regions(case, state, ctl),
        diagnostics=diagnostics,
    )
    return state, report
