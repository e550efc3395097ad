"""Minimizing-movement stepper for the chemotaxis system.

Each time step approximately minimizes

    (1/2 tau) * (W(u, u_prev)^2 / chi + ||v - v_prev||_L2^2) + E(u, v)

by alternating two blocks: an exact elliptic solve in v (the quadratic
block) and a convex free-endpoint transport problem in u, reusing the
dynamic-distance machinery with the internal energy and the pairing against
the frozen v attached to the path endpoint. Block alternation guarantees
the per-step comparison inequalities (the new state never beats staying
put, so the energy ledger is non-increasing), which is exactly what every
downstream estimate consumes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError, SingularMobility, StepRejected
from .grid import DensityField, Grid, field_norm, load_density, save_density, solve_elliptic
from .model import ModelParams, energy
from .wdist import (
    DEFAULT_MAX_ITER,
    DEFAULT_N_T,
    DEFAULT_TOL,
    PowerMobility,
    TransportPath,
    _DynamicSolver,
    _EndpointEnergy,
    _fields_from_arrays,
    action,
    solve_distance,
)


@dataclass(frozen=True)
class StepControls:
    """Inner-solver knobs for one minimizing-movement step."""

    n_t: int = DEFAULT_N_T
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL
    sweeps_max: int = 5
    sweep_rel_tol: float = 1e-7
    comparison_tol: float = 1e-8


@dataclass(frozen=True)
class JkoState:
    """Accepted state after one step: fields, step index, objective, step distance.

    ``w_step`` is the transport cost of the accepted step measured along the
    step's own minimizing path (an upper bound on the true distance, and the
    quantity the energy estimates control).
    """

    u: DensityField
    v: DensityField
    k: int
    f_tau_value: float
    w_step: float


@dataclass
class Trajectory:
    """Piecewise-constant-in-time record of accepted states plus diagnostics."""

    tau: float
    params: ModelParams
    states: list[JkoState]
    ledger: list[dict] = field(default_factory=list)

    @property
    def grid(self) -> Grid:
        return self.states[0].u.grid

    def times(self) -> list[float]:
        return [s.k * self.tau for s in self.states]

    def state_at(self, t: float) -> JkoState:
        """State of the piecewise-constant interpolant at time t (left-open bins)."""
        if t <= 0:
            return self.states[0]
        k = min(math.ceil(t / self.tau - 1e-12), len(self.states) - 1)
        return self.states[k]

    def energies(self) -> np.ndarray:
        return np.array([row["E"] for row in self.ledger])

    def save(self, out_dir, stride: int = 1) -> None:
        """Write manifest.json plus per-step field CSVs every ``stride`` steps."""
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            manifest = {
                "tau": self.tau,
                "params": {
                    "p": self.params.p,
                    "alpha": self.params.alpha,
                    "chi": self.params.chi,
                    "dim": self.params.dim,
                    "eps": self.params.eps,
                    "delta": self.params.delta,
                },
                "grid": self.grid.metadata(),
                "times": self.times(),
                "stride": stride,
                "diagnostics": self.ledger,
            }
            (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
        except OSError as exc:
            raise IoError(f"cannot write trajectory to {out}: {exc}") from exc
        for s in self.states:
            if s.k % stride == 0 or s.k == len(self.states) - 1:
                save_density(s.u, out / f"u_{s.k:05d}.csv")
                save_density(s.v, out / f"v_{s.k:05d}.csv")

    @classmethod
    def load(cls, out_dir) -> "Trajectory":
        """Rebuild a trajectory from a directory saved with stride 1.

        Directories saved with a coarser stride lack intermediate states and
        can only be read with :func:`mobflow.diagnostics.load_states`.
        """
        out = Path(out_dir)
        try:
            manifest = json.loads((out / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IoError(f"cannot read trajectory from {out}: {exc}") from exc
        params = ModelParams(**manifest["params"])
        states = []
        for k, _t in enumerate(manifest["times"]):
            u_path = out / f"u_{k:05d}.csv"
            if not u_path.exists():
                raise IoError(
                    f"trajectory in {out} is missing step {k} (saved with stride "
                    f"{manifest.get('stride', '?')}); only stride-1 saves reload fully"
                )
            u = load_density(u_path)
            v = load_density(out / f"v_{k:05d}.csv")
            row = manifest["diagnostics"][k] if k < len(manifest["diagnostics"]) else {}
            states.append(
                JkoState(u, v, k, row.get("F_tau", math.nan), row.get("w_step", math.nan))
            )
        return cls(manifest["tau"], params, states, manifest["diagnostics"])


# ---------------------------------------------------------------------------
# Step objective and the two blocks
# ---------------------------------------------------------------------------


def step_objective(
    u: DensityField,
    v: DensityField,
    prev: JkoState,
    tau: float,
    params: ModelParams,
    w_value: float | None = None,
    n_t: int = DEFAULT_N_T,
    tol: float = DEFAULT_TOL,
) -> float:
    """Per-step movement-limited objective; solves the distance unless given.

    ``w_value`` short-circuits the transport solve with a precomputed step
    distance (e.g. the action of an already-known path).
    """
    if w_value is None:
        w_value = solve_distance(u, prev.u, params, n_t=n_t, tol=tol).value
    dv = u.grid.cell_volume * float(((v.values - prev.v.values) ** 2).sum())
    return (w_value**2 / params.chi + dv) / (2.0 * tau) + energy(u, v, params)


def v_step(
    u: DensityField, v_prev: DensityField, tau: float, params: ModelParams
) -> DensityField:
    """Exact minimizer of the step objective in v for frozen u.

    Solves ((1 + 1/tau) I - Lap) v = v_prev/tau + u with zero-flux
    boundaries; a nonnegative minimizer is recovered by taking the absolute
    value if the solve dips below zero (it never increases the objective
    when u and v_prev are nonnegative).
    """
    rhs = DensityField(u.grid, v_prev.values / tau + u.values)
    v = solve_elliptic(1.0, 1.0 + 1.0 / tau, rhs)
    if v.min() < -1e-12:
        v = DensityField(u.grid, np.abs(v.values))
    return v


def _u_solver(
    u_prev: DensityField,
    v: DensityField,
    tau: float,
    params: ModelParams,
    controls: StepControls,
) -> _DynamicSolver:
    if params.eps <= 0.0:
        raise SingularMobility("the transport block needs a positive regularization")
    grid = u_prev.grid
    n_t = controls.n_t
    # normalize so every action slot carries unit weight: multiply the whole
    # objective (action / (2 tau chi) + endpoint energy) by 2 tau chi n_t / vol
    scale = 2.0 * tau * params.chi * n_t / grid.cell_volume
    endpoint = _EndpointEnergy(
        coeff=scale * params.energy_coefficient,
        q=params.internal_exponent,
        v_values=scale * v.values,
        cellvol=grid.cell_volume,
    )
    return _DynamicSolver(
        grid,
        n_t,
        u_prev.values,
        None,
        mobility=PowerMobility(params.alpha, params.eps),
        obj_scale=n_t / grid.cell_volume,
        endpoint_energy=endpoint,
        max_iter=controls.max_iter,
        tol=controls.tol,
    )


def u_step(
    u_prev: DensityField,
    v: DensityField,
    tau: float,
    params: ModelParams,
    n_t: int = DEFAULT_N_T,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> tuple[DensityField, TransportPath]:
    """Free-endpoint transport block: minimize action/(2 tau chi) plus the
    endpoint internal energy minus the pairing with the frozen v.

    The path starts at ``u_prev`` with a free right endpoint; the stay-put
    path is the initial candidate, so the result never loses to it.
    """
    controls = StepControls(n_t=n_t, max_iter=max_iter, tol=tol)
    solver = _u_solver(u_prev, v, tau, params, controls)
    rho, w, _obj, _act, _it, _gap = solver.solve()
    path = _fields_from_arrays(u_prev.grid, n_t, rho, w)
    return path.rho[-1], path


# ---------------------------------------------------------------------------
# Full step and trajectory
# ---------------------------------------------------------------------------


def jko_step(
    prev: JkoState, tau: float, params: ModelParams, controls: StepControls | None = None
) -> JkoState:
    """One accepted minimizing-movement step via block alternation.

    Alternates the transport block and the elliptic block (each warm-started
    from the previous sweep) until the objective stalls or the sweep cap is
    reached, then verifies the stay-put comparison: the accepted objective
    must not exceed the previous energy beyond ``comparison_tol``.

    Raises
    ------
    StepRejected
        If the comparison inequality fails (an inner-solver failure).
    """
    controls = controls or StepControls()
    e_prev = energy(prev.u, prev.v, params)
    v_cur = prev.v
    warm_rho = warm_w = warm_y = None
    f_best = math.inf
    u_new = prev.u
    w_step = 0.0
    for _ in range(controls.sweeps_max):
        solver = _u_solver(prev.u, v_cur, tau, params, controls)
        rho, w, _obj, act, _it, _gap = solver.solve(rho0=warm_rho, w0=warm_w, y0=warm_y)
        warm_rho, warm_w, warm_y = rho, w, solver.duals
        path = _fields_from_arrays(prev.u.grid, controls.n_t, rho, w)
        u_cand = path.rho[-1]
        v_cand = v_step(u_cand, prev.v, tau, params)
        w_cand = math.sqrt(act)
        f_cand = step_objective(u_cand, v_cand, prev, tau, params, w_value=w_cand)
        if f_cand < f_best:
            rel_drop = (f_best - f_cand) / max(abs(f_cand), 1.0)
            u_new, v_cur, w_step, f_best = u_cand, v_cand, w_cand, f_cand
            if rel_drop <= controls.sweep_rel_tol:
                break
        else:
            break
    if f_best > e_prev + controls.comparison_tol:
        raise StepRejected(
            f"step objective {f_best:.12e} exceeds stay-put value {e_prev:.12e}"
        )
    return JkoState(u_new, v_cur, prev.k + 1, f_best, w_step)


def run_trajectory(
    u0: DensityField,
    v0: DensityField,
    tau: float,
    t_end: float,
    params: ModelParams,
    controls: StepControls | None = None,
) -> Trajectory:
    """Run ceil(t_end/tau) accepted steps and record per-step diagnostics.

    On a rejected step the partial trajectory is attached to the raised
    :class:`StepRejected`.
    """
    controls = controls or StepControls()
    n_steps = max(0, math.ceil(t_end / tau - 1e-12))
    state = JkoState(u0, v0, 0, energy(u0, v0, params), 0.0)
    traj = Trajectory(tau, params, [state])
    traj.ledger.append(_ledger_row(state, tau, params))
    for _ in range(n_steps):
        try:
            state = jko_step(state, tau, params, controls)
        except StepRejected as exc:
            exc.partial = traj
            raise
        traj.states.append(state)
        traj.ledger.append(_ledger_row(state, tau, params))
    return traj


def _ledger_row(state: JkoState, tau: float, params: ModelParams) -> dict:
    q = params.internal_exponent
    return {
        "k": state.k,
        "t": state.k * tau,
        "E": energy(state.u, state.v, params),
        "F_tau": state.f_tau_value,
        "w_step": state.w_step,
        "mass": state.u.mass(),
        "min_u": state.u.min(),
        "u_norm": field_norm(state.u, "Lq", q),
        "v_h1": field_norm(state.v, "H1"),
    }


__all__ = [
    "StepControls",
    "JkoState",
    "Trajectory",
    "step_objective",
    "v_step",
    "u_step",
    "jko_step",
    "run_trajectory",
    "action",
    "TransportPath",
]
