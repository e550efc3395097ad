"""Measurable checks over trajectories: conservation, monotonicity, estimates.

Every qualitative statement the stepper is supposed to satisfy becomes
either a hard pass/fail check with a named threshold or a reported fitted
constant whose stability under refinement is the testable property. All
thresholds live in one configuration record; nothing is inlined.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadExponent, GridMismatch, IoError
from .grid import (
    DensityField,
    cell_inner,
    face_inner,
    field_norm,
    grad_arrays,
    laplacian_arrays,
    load_density,
)
from .jko import Trajectory
from .model import ModelParams, energy_floor_gap, mobility
from .wdist import solve_distance


@dataclass(frozen=True)
class Thresholds:
    """Every pass/fail constant used by the checks, in one place."""

    energy_increase: float = 1e-8
    mass_error: float = 1e-8
    min_density: float = -1e-10
    v_residual: float = 1e-6


DEFAULT_THRESHOLDS = Thresholds()


@dataclass
class DiagnosticsReport:
    """Per-step table plus fitted constants, residuals and pass/fail flags."""

    table: list[dict]
    fitted: dict
    residuals: dict
    flags: dict
    thresholds: Thresholds = field(default_factory=Thresholds)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            payload = {
                "fitted": self.fitted,
                "residuals": self.residuals,
                "flags": self.flags,
                "thresholds": asdict(self.thresholds),
                "passed": self.passed,
            }
            (out / "report.json").write_text(json.dumps(payload, indent=1))
            if self.table:
                with (out / "diagnostics.csv").open("w", newline="") as fh:
                    writer = csv.DictWriter(fh, fieldnames=list(self.table[0].keys()))
                    writer.writeheader()
                    writer.writerows(self.table)
        except OSError as exc:
            raise IoError(f"cannot write report to {out}: {exc}") from exc


# ---------------------------------------------------------------------------
# Hard checks
# ---------------------------------------------------------------------------


def check_energy_monotone(
    traj: Trajectory, thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> tuple[bool, float]:
    """Worst per-step energy increase; passes when below the threshold."""
    e = traj.energies()
    worst = float(np.diff(e).max()) if len(e) > 1 else 0.0
    return worst <= thresholds.energy_increase, worst


def check_conservation(
    traj: Trajectory, thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> tuple[bool, float, float]:
    """Mass error and density minimum over the whole run."""
    mass_err = max(abs(row["mass"] - 1.0) for row in traj.ledger)
    min_u = min(row["min_u"] for row in traj.ledger)
    ok = mass_err <= thresholds.mass_error and min_u >= thresholds.min_density
    return ok, mass_err, min_u


# ---------------------------------------------------------------------------
# Fitted constants
# ---------------------------------------------------------------------------


def equicontinuity_fit(
    traj: Trajectory,
    sample_pairs: list[tuple[float, float]],
    n_t: int = 16,
    tol: float = 1e-6,
) -> float:
    """Fitted half-Hoelder constant of the interpolant in the transport metric.

    For each sampled time pair the step distance is solved fresh and divided
    by sqrt|t-s| + sqrt(tau); the fitted constant is the largest ratio.
    """
    if len(sample_pairs) < 5:
        raise ValueError("need at least 5 sampled time pairs")
    worst = 0.0
    for t, s in sample_pairs:
        a = traj.state_at(t).u
        b = traj.state_at(s).u
        if np.array_equal(a.values, b.values):
            continue
        w = solve_distance(a, b, traj.params, n_t=n_t, tol=tol).value
        worst = max(worst, w / (math.sqrt(abs(t - s)) + math.sqrt(traj.tau)))
    return worst


def energy_floor_fit(traj: Trajectory) -> float:
    """Largest gap of the coercivity bound over the run (the fitted constant)."""
    return max(
        energy_floor_gap(s.u, s.v, traj.params) for s in traj.states
    )


def gradient_exponent(params: ModelParams) -> float:
    """Integrability exponent 4/(3 alpha + 1 - p) of the mobility gradient."""
    denom = 3.0 * params.alpha + 1.0 - params.p
    if denom <= 0.0:
        raise BadExponent(f"3 alpha + 1 - p = {denom} must be positive")
    return 4.0 / denom


def apriori_norms(traj: Trajectory) -> dict:
    """Time integrals of the regularity quantities the energy estimates control.

    Reports the dissipation integral of the (p+1-alpha)/2 power gradient,
    the squared elliptic defect of the chemical equation, a second-order
    norm surrogate for v (L2 + gradient + Laplacian), and the q-integral of
    the mobility gradient with q = 4/(3 alpha + 1 - p).
    """
    params = traj.params
    q_grad = gradient_exponent(params)
    tau = traj.tau
    grid = traj.grid
    vol = grid.cell_volume
    power = params.internal_exponent / 2.0
    per_step = []
    totals = {
        "int_grad_power_sq": 0.0,
        "int_elliptic_defect_sq": 0.0,
        "int_v_h2_sq": 0.0,
        "int_grad_mobility_q": 0.0,
    }
    for s in traj.states:
        u, v = s.u.values, s.v.values
        gu = grad_arrays(grid, np.maximum(u, 0.0) ** power)
        grad_power_sq = float(sum((g**2).sum() for g in gu) * vol)
        defect = laplacian_arrays(grid, v) - v + u
        defect_sq = float((defect**2).sum() * vol)
        lap_v = laplacian_arrays(grid, v)
        v_h2_sq = field_norm(s.v, "H1") ** 2 + float((lap_v**2).sum() * vol)
        gm = grad_arrays(grid, mobility(np.maximum(u, 0.0), params))
        grad_mob_q = float(sum((np.abs(g) ** q_grad).sum() for g in gm) * vol)
        per_step.append(
            {
                "k": s.k,
                "grad_power_sq": grad_power_sq,
                "elliptic_defect_sq": defect_sq,
                "v_h2_sq": v_h2_sq,
                "grad_mobility_q": grad_mob_q,
            }
        )
        if s.k > 0:
            totals["int_grad_power_sq"] += tau * grad_power_sq
            totals["int_elliptic_defect_sq"] += tau * defect_sq
            totals["int_v_h2_sq"] += tau * v_h2_sq
            totals["int_grad_mobility_q"] += tau * grad_mob_q
    bounded = all(math.isfinite(x) for x in totals.values())
    return {"q": q_grad, "per_step": per_step, **totals, "bounded": bounded}


# ---------------------------------------------------------------------------
# Weak-formulation residuals
# ---------------------------------------------------------------------------


def cosine_test_functions(grid, max_mode: int = 3) -> list[DensityField]:
    """Tensor cosine modes; their normal derivative vanishes on the boundary."""
    axes = [grid.axis_centers(a) for a in range(grid.dim)]
    fns = []
    ranges = [range(max_mode + 1)] * grid.dim
    for modes in itertools.product(*ranges):
        if all(m == 0 for m in modes):
            continue
        vals = np.ones(grid.shape)
        for a, m in enumerate(modes):
            profile = np.cos(m * np.pi * axes[a] / grid.extents[a])
            shape = [1] * grid.dim
            shape[a] = grid.cells[a]
            vals = vals * profile.reshape(shape)
        fns.append(DensityField(grid, vals))
    return fns


def weak_residual(traj: Trajectory, test_functions: list[DensityField] | None = None) -> dict:
    """Residuals of both weak formulations under midpoint time quadrature.

    The cell-density equation is tested in its conservative form (the
    subcritical equality regime contracts the flux as
    u^alpha [(1+alpha) grad u - chi grad v]; otherwise grad(u^p) is used
    directly). The chemical equation telescopes exactly up to the linear
    solver tolerance.
    """
    params = traj.params
    grid = traj.grid
    vol = grid.cell_volume
    tau = traj.tau
    if test_functions is None:
        test_functions = cosine_test_functions(grid)
    equality_regime = abs(params.p - (1.0 + params.alpha)) <= 1e-12

    results = []
    for phi in test_functions:
        gphi = grad_arrays(grid, phi.values)
        lhs_u = 0.0
        lhs_v_grad = 0.0
        lhs_v_mass = 0.0
        for s in traj.states[1:]:
            u, v = s.u.values, s.v.values
            gu = grad_arrays(grid, u)
            gv = grad_arrays(grid, v)
            gup = None if equality_regime else grad_arrays(grid, np.maximum(u, 0.0) ** params.p)
            term = 0.0
            for a in range(grid.dim):
                u_face = _face_avg(u, a)
                if equality_regime:
                    flux = np.maximum(u_face, 0.0) ** params.alpha * (
                        (1.0 + params.alpha) * _interior(gu[a], a)
                        - params.chi * _interior(gv[a], a)
                    )
                else:
                    flux = _interior(gup[a], a) - params.chi * np.maximum(
                        u_face, 0.0
                    ) ** params.alpha * _interior(gv[a], a)
                term += float((flux * _interior(gphi[a], a)).sum() * vol)
            lhs_u += tau * term
            lhs_v_grad += tau * face_inner(grid, gv, gphi)
            lhs_v_mass += tau * cell_inner(grid, v - u, phi.values)
        u0 = traj.states[0].u.values
        uT = traj.states[-1].u.values
        v0 = traj.states[0].v.values
        vT = traj.states[-1].v.values
        rhs_u = cell_inner(grid, u0 - uT, phi.values)
        rhs_v = cell_inner(grid, v0 - vT, phi.values)
        results.append(
            {
                "u_residual": abs(lhs_u - rhs_u),
                "v_residual": abs(lhs_v_grad + lhs_v_mass - rhs_v),
            }
        )
    return {
        "per_function": results,
        "u_residual_max": max(r["u_residual"] for r in results),
        "v_residual_max": max(r["v_residual"] for r in results),
    }


def _face_avg(values: np.ndarray, axis: int) -> np.ndarray:
    n = values.shape[axis]
    lo = np.take(values, range(0, n - 1), axis=axis)
    hi = np.take(values, range(1, n), axis=axis)
    return 0.5 * (lo + hi)


def _interior(face_array: np.ndarray, axis: int) -> np.ndarray:
    idx = [slice(None)] * face_array.ndim
    idx[axis] = slice(1, -1)
    return face_array[tuple(idx)]


# ---------------------------------------------------------------------------
# Trajectory comparison
# ---------------------------------------------------------------------------


def sample_states(traj_or_snaps) -> list[tuple[float, DensityField, DensityField]]:
    """Normalize a trajectory, snapshot list, or triple list to (t, u, v) triples."""
    if isinstance(traj_or_snaps, Trajectory):
        return [(s.k * traj_or_snaps.tau, s.u, s.v) for s in traj_or_snaps.states]
    out = []
    for item in traj_or_snaps:
        if isinstance(item, tuple):
            out.append(item)
        else:
            out.append((item.t, item.u, item.v))
    return out


def load_states(run_dir) -> list[tuple[float, DensityField, DensityField]]:
    """Load (t, u, v) triples from a saved trajectory or snapshot directory."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "states.json"
    if not manifest_path.exists():
        manifest_path = run_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoError(f"cannot read run directory {run_dir}: {exc}") from exc
    triples = []
    for k, t in enumerate(manifest["times"]):
        u_path = run_dir / f"u_{k:05d}.csv"
        if not u_path.exists():
            continue
        triples.append((float(t), load_density(u_path), load_density(run_dir / f"v_{k:05d}.csv")))
    return triples


def compare_trajectories(a, b, norm: str = "L1") -> dict:
    """Per-time field discrepancies between two runs with nearest-time pairing."""
    sa = sample_states(a)
    sb = sample_states(b)
    if sa[0][1].grid != sb[0][1].grid:
        raise GridMismatch("trajectories live on different grids")
    tb = np.array([t for t, _, _ in sb])
    rows = []
    for t, u, v in sa:
        j = int(np.argmin(np.abs(tb - t)))
        _, ub, vb = sb[j]
        du = field_norm(DensityField(u.grid, u.values - ub.values), norm)
        dv = field_norm(DensityField(v.grid, v.values - vb.values), norm)
        rows.append({"t": t, "t_other": float(tb[j]), "u_diff": du, "v_diff": dv})
    return {
        "rows": rows,
        "u_diff_max": max(r["u_diff"] for r in rows),
        "v_diff_max": max(r["v_diff"] for r in rows),
    }


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------


def build_report(
    traj: Trajectory,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
    equicontinuity_pairs: list[tuple[float, float]] | None = None,
) -> DiagnosticsReport:
    """Assemble the standard report for one trajectory."""
    mono_ok, worst_inc = check_energy_monotone(traj, thresholds)
    cons_ok, mass_err, min_u = check_conservation(traj, thresholds)
    norms = apriori_norms(traj)
    residuals = weak_residual(traj)
    fitted = {
        "sup_norm_bound": max(
            row["u_norm"] ** traj.params.internal_exponent + row["v_h1"] ** 2
            for row in traj.ledger
        ),
        "energy_floor": energy_floor_fit(traj),
        "gradient_exponent_q": norms["q"],
        "int_grad_power_sq": norms["int_grad_power_sq"],
        "int_elliptic_defect_sq": norms["int_elliptic_defect_sq"],
        "int_v_h2_sq": norms["int_v_h2_sq"],
        "int_grad_mobility_q": norms["int_grad_mobility_q"],
    }
    if equicontinuity_pairs is not None:
        fitted["equicontinuity_constant"] = equicontinuity_fit(traj, equicontinuity_pairs)
    flags = {
        "energy_monotone": mono_ok,
        "conservation": cons_ok,
        "norms_bounded": norms["bounded"],
        "v_equation_exact": residuals["v_residual_max"] <= thresholds.v_residual,
    }
    table = [dict(row) for row in traj.ledger]
    for row, extra in zip(table, norms["per_step"]):
        row.update({k: v for k, v in extra.items() if k != "k"})
    res_summary = {
        "u_residual_max": residuals["u_residual_max"],
        "v_residual_max": residuals["v_residual_max"],
        "worst_energy_increase": worst_inc,
        "mass_error": mass_err,
        "min_density": min_u,
    }
    return DiagnosticsReport(table, fitted, res_summary, flags, thresholds)
