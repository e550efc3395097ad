"""Minimizing-movement solver for chemotaxis with nonlinear mobility.

Public surface: grid fields and operators, model parameters and energy,
the dynamic weighted transport distance, the variational time stepper, the
finite-volume reference solvers, and the diagnostics suite.
"""

__version__ = "0.1.0"

from .errors import (
    BadExponent,
    CflViolation,
    ConfigError,
    GridMismatch,
    InvalidPath,
    IoError,
    MassMismatch,
    MobflowError,
    NoConvergence,
    SingularMobility,
    SingularSystem,
    StepRejected,
)
from .grid import (
    DensityField,
    FaceField,
    Grid,
    discrete_divergence,
    discrete_gradient,
    field_norm,
    heat_step,
    solve_elliptic,
)
from .model import (
    ModelParams,
    Regime,
    RegimeLabel,
    aux_flow_lyapunov,
    aux_flow_rate_bound,
    classify_regime,
    energy,
    entropy_density,
    mobility,
    total_entropy,
)
from .wdist import (
    ConstantMobility,
    DistanceResult,
    LinearMobility,
    PowerMobility,
    TransportPath,
    action,
    prox_action,
    recover_potential,
    solve_distance,
)
from .jko import (
    JkoState,
    StepControls,
    Trajectory,
    jko_step,
    run_trajectory,
    step_objective,
    u_step,
    v_step,
)
from .reference import FvState, aux_flow_step, cfl_limit, fv_step, run_reference
from .diagnostics import (
    DiagnosticsReport,
    Thresholds,
    apriori_norms,
    build_report,
    check_conservation,
    check_energy_monotone,
    compare_trajectories,
    equicontinuity_fit,
    weak_residual,
)
