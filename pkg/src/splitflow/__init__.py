"""AC power flow with continuously differentiable device controls.

The solver works in rectangular current-voltage coordinates: every device
contributes linearized circuit stamps to a sparse NR system, and the
control loops that classical solvers run in outer iterations (reactive
limits, remote voltage control, switched shunts, transformer taps,
distributed slack) are smooth models solved implicitly inside NR, with
homotopy continuation for robustness. A classical hard-switching outer
loop is included for comparison.
"""

from .baseline_outer_loop import OuterPolicy, SwitchTrace, classify_stability, solve_outer_loop
from .case_model import (
    Branch,
    Bus,
    FixedShunt,
    Generator,
    Load,
    NetworkCase,
    RemoteControlGroup,
    SwitchedShunt,
    TapControl,
    parse_matpower,
    parse_native,
    serialize_native,
    validate,
)
from .circuit_stamps import (
    ControlMode,
    LinearSystem,
    StateVector,
    assemble,
    base_control,
    build_index,
    classify_regions,
    flat_start,
    residual,
)
from .discrete_control import resolve_after_snap, snap_to_steps
from .errors import (
    CaseParseError,
    CaseValidationError,
    ContinuationError,
    SingularPointError,
    SingularSystemError,
    SnappedInfeasibleError,
    SplitflowError,
)
from .homotopy_driver import (
    HomotopySchedule,
    init_p_limit_relaxation,
    init_q_limit_relaxation,
    run_homotopy,
    tx_stepping,
)
from .nr_solver import SolveReport, SolverOptions, nr_solve, solve_linear, step_limit
from .smooth_primitives import (
    ParticipationCurve,
    SigmoidSaturation,
    participation_build,
    participation_deriv,
    participation_eval,
    sigmoid_deriv,
    sigmoid_eval,
)

__version__ = "0.1.0"
