"""Command-line entry point and machine-readable reporting.

Exit status contract: 0 converged, 1 not converged, 2 input error.
The summary is key/value text (one record per solve); the optional CSV
trace has a fixed header suitable for plotting convergence and switching
behavior externally.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field

import click

from .baseline_outer_loop import (
    OuterPolicy,
    classify_stability,
    solve_outer_loop,
)
from .case_model import NetworkCase, parse_matpower, parse_native
from .circuit_stamps import ControlMode, StateVector, base_control, flat_start
from .discrete_control import resolve_after_snap
from .errors import SplitflowError
from .homotopy_driver import METHODS, HomotopySchedule, run_homotopy
from .nr_solver import SolveReport, SolverOptions

SUMMARY_VERSION = 1

TRACE_COLUMNS = [
    "phase", "outer_iter", "inner_iter", "lambda_s", "lambda_g_max",
    "lambda_p", "lambda_tx", "max_residual", "max_step", "pv_to_pq",
    "pq_to_pv",
]


@dataclass
class PipelineResult:
    case: NetworkCase
    state: StateVector
    report: SolveReport
    stability: dict = field(default_factory=dict)
    switch_trace: object = None
    snap_plan: object = None


def load_case(path: str, fmt: str | None = None) -> NetworkCase:
    """Parse a case file; format inferred from the extension by default."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if fmt is None:
        fmt = "native" if path.endswith((".json", ".native")) else "matpower"
    if fmt == "matpower":
        return parse_matpower(text, name=path)
    return parse_native(text, name=path)


def run_continuous(
    case: NetworkCase,
    opts: SolverOptions,
    method: str = "none",
    smoothing: float = 5000.0,
    snap: bool = False,
) -> PipelineResult:
    base = base_control(case, smoothing=smoothing)
    sched = HomotopySchedule(method=method)
    state, report = run_homotopy(case, None, sched, opts, base)
    result = PipelineResult(case, state, report,
                            stability=classify_stability(case, state))
    if snap and report.converged:
        state2, report2, plan = resolve_after_snap(case, state, opts, base)
        report2.trace = report.trace + report2.trace
        report2.iterations += report.iterations
        result = PipelineResult(case, state2, report2,
                                stability=classify_stability(case, state2),
                                snap_plan=plan)
    return result


def run_baseline(
    case: NetworkCase,
    opts: SolverOptions,
    order: str = "smallest-first",
    smoothing: float = 5000.0,
) -> PipelineResult:
    base = base_control(case, smoothing=smoothing)
    policy = OuterPolicy(order=order)
    state, report, strace = solve_outer_loop(case, opts, policy, base)
    return PipelineResult(case, state, report,
                          stability=classify_stability(case, state),
                          switch_trace=strace)


def voltage_extrema(case: NetworkCase, state: StateVector):
    """(v_max, v_min, theta_max_deg, theta_min_deg) over all buses."""
    vmax = vmin = None
    tmax = tmin = None
    for pos in range(len(case.buses)):
        v = state.v_complex(pos)
        vm = abs(v)
        th = math.degrees(math.atan2(v.imag, v.real))
        vmax = vm if vmax is None else max(vmax, vm)
        vmin = vm if vmin is None else min(vmin, vm)
        tmax = th if tmax is None else max(tmax, th)
        tmin = th if tmin is None else min(tmin, th)
    return vmax, vmin, tmax, tmin


def summary_lines(result: PipelineResult, label: str = "") -> list[str]:
    case, state, report = result.case, result.state, result.report
    vmax, vmin, tmax, tmin = voltage_extrema(case, state)
    regions = report.device_regions
    unstable = sum(1 for s in result.stability.values() if s == "unstable")
    lines = [
        f"summary_version: {SUMMARY_VERSION}",
        f"case: {case.name}",
        f"pipeline: {label}" if label else "pipeline: continuous",
        f"converged: {'true' if report.converged else 'false'}",
        f"iterations: {report.iterations}",
        f"outer_iterations: {report.outer_iterations}",
        f"final_residual: {report.final_residual:.3e}",
        f"v_max_pu: {vmax:.6f}",
        f"v_min_pu: {vmin:.6f}",
        f"theta_max_deg: {tmax:.4f}",
        f"theta_min_deg: {tmin:.4f}",
        f"devices_at_min: {sum(1 for r in regions.values() if r == 'at-min')}",
        f"devices_at_max: {sum(1 for r in regions.values() if r == 'at-max')}",
        f"devices_controlling: "
        f"{sum(1 for r in regions.values() if r == 'controlling')}",
        f"unstable_generators: {unstable}",
    ]
    for key in sorted(regions, key=str):
        lines.append(f"region.{key[0]}.{key[1]}: {regions[key]}")
    if result.snap_plan is not None:
        for j, b in sorted(result.snap_plan.shunt_b.items()):
            lines.append(f"snapped.shunt.{j}: {b:.6f}")
        for bi, tr in sorted(result.snap_plan.tap_ratio.items()):
            lines.append(f"snapped.tap.{bi}: {tr:.6f}")
    if case.agc_enabled and state.index.dps_col is not None:
        from .circuit_stamps import agc_response

        dps = float(state.x[state.index.dps_col])
        lines.append(f"slack_surplus_pu: {dps:.6f}")
        ctl = base_control(case)
        for i in state.index.agc_member_idx:
            g = case.generators[i]
            dp, _ = agc_response(g, ctl, i, dps)
            lines.append(
                f"dispatch.{g.bus}: {(g.p_g + dp) * case.s_base:.2f}"
            )
    return lines


def write_trace(path: str, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow([
                r.phase, r.outer_iter, r.inner_iter,
                f"{r.lambda_s:.6g}", f"{r.lambda_g_max:.6g}",
                f"{r.lambda_p:.6g}", f"{r.lambda_tx:.6g}",
                f"{r.max_residual:.6e}", f"{r.max_step:.6e}",
                r.pv_to_pq, r.pq_to_pv,
            ])


def _apply_contingency(case: NetworkCase, spec: str) -> NetworkCase:
    if not spec.startswith("drop-gen:"):
        raise click.UsageError(
            f"unknown contingency {spec!r}; expected drop-gen:<bus-id>"
        )
    return case.drop_generator(int(spec.split(":", 1)[1]))


@click.group()
def main():
    """Power flow with continuous device-control models."""


@main.command()
@click.argument("case_file", type=click.Path())
@click.option("--models", type=click.Choice(["continuous", "outer-loop"]),
              default="continuous", show_default=True)
@click.option("--homotopy", type=click.Choice(list(METHODS)), default="none",
              show_default=True)
@click.option("--smoothing", type=float, default=5000.0, show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--max-iter", type=int, default=100, show_default=True)
@click.option("--agc", is_flag=True, help="Enable distributed slack.")
@click.option("--contingency", default=None,
              help="Apply a contingency, e.g. drop-gen:211.")
@click.option("--snap", is_flag=True,
              help="Snap discrete devices and re-solve after convergence.")
@click.option("--order", type=click.Choice(["smallest-first", "largest-first"]),
              default="smallest-first", show_default=True,
              help="Outer-loop switching order.")
@click.option("--trace", "trace_path", type=click.Path(), default=None,
              help="Write a per-iteration CSV trace.")
@click.option("--format", "fmt", type=click.Choice(["matpower", "native"]),
              default=None, help="Case format (default: by extension).")
def solve(case_file, models, homotopy, smoothing, tol, max_iter, agc,
          contingency, snap, order, trace_path, fmt):
    """Solve one case and print a key/value summary."""
    try:
        case = load_case(case_file, fmt)
        if agc:
            from dataclasses import replace as _replace

            case = _replace(case, agc_enabled=True)
        if contingency:
            case = _apply_contingency(case, contingency)
    except (OSError, SplitflowError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)

    opts = SolverOptions(tol_residual=tol, max_iter=max_iter)
    try:
        if models == "continuous":
            result = run_continuous(case, opts, method=homotopy,
                                    smoothing=smoothing, snap=snap)
        else:
            result = run_baseline(case, opts, order=order, smoothing=smoothing)
    except SplitflowError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)

    label = models
    for line in summary_lines(result, label=label):
        click.echo(line)
    if trace_path:
        write_trace(trace_path, result.report.trace)
    sys.exit(0 if result.report.converged else 1)


@main.command()
@click.argument("case_file", type=click.Path())
@click.option("--homotopy", type=click.Choice(list(METHODS)), default="none",
              show_default=True)
@click.option("--smoothing", type=float, default=5000.0, show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--max-iter", type=int, default=100, show_default=True)
@click.option("--order", type=click.Choice(["smallest-first", "largest-first"]),
              default="smallest-first", show_default=True)
@click.option("--trace", "trace_path", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["matpower", "native"]),
              default=None)
def compare(case_file, homotopy, smoothing, tol, max_iter, order, trace_path,
            fmt):
    """Run the continuous and outer-loop pipelines side by side."""
    try:
        case = load_case(case_file, fmt)
    except (OSError, SplitflowError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)

    opts = SolverOptions(tol_residual=tol, max_iter=max_iter)
    columns = {}
    for label, runner in (
        ("continuous", lambda: run_continuous(case, opts, method=homotopy,
                                              smoothing=smoothing)),
        ("outer-loop", lambda: run_baseline(case, opts, order=order,
                                            smoothing=smoothing)),
    ):
        try:
            columns[label] = runner()
        except SplitflowError as exc:
            columns[label] = exc

    rows = []
    for label, res in columns.items():
        if isinstance(res, Exception):
            rows.append((label, "FAILED", "-", "-", "-", "-", "-", "-"))
            continue
        vmax, vmin, tmax, tmin = voltage_extrema(case, res.state)
        switches = (res.switch_trace.total_switches()
                    if res.switch_trace is not None else 0)
        unstable = sum(1 for s in res.stability.values() if s == "unstable")
        rows.append((
            label,
            "yes" if res.report.converged else "no",
            str(res.report.iterations),
            str(switches),
            f"{vmax:.5f}", f"{vmin:.5f}",
            f"{tmax:.2f}/{tmin:.2f}",
            str(unstable),
        ))
    header = ("pipeline", "converged", "iterations", "switches", "v_max",
              "v_min", "theta_max/min", "unstable")
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    click.echo("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        click.echo("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))

    if trace_path:
        all_rows = []
        for res in columns.values():
            if not isinstance(res, Exception):
                all_rows.extend(res.report.trace)
        write_trace(trace_path, all_rows)

    ok = all(not isinstance(r, Exception) and r.report.converged
             for r in columns.values())
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
