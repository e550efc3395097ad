"""Direct finite-volume solvers used as oracles for the variational stepper.

Explicit two-point-flux nonlinear diffusion plus upwinded chemotactic drift
for the cell density, implicit (backward-Euler) linear solve for the
chemical concentration, on the same staggered grid operators as everything
else. A drift-diffusion auxiliary flow with implicit diffusion shares the
flux assembly.

All schemes conserve mass exactly and keep densities nonnegative: upwinding
plus the CFL bound prevent new extrema from the transport terms, and any
roundoff-scale undershoot is removed by a conservative clamp (negatives are
zeroed and the surplus is taken proportionally from the positive cells).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CflViolation
from .grid import DensityField, Grid, heat_step, solve_elliptic
from .model import ModelParams, mobility

CFL_SAFETY = 0.4


@dataclass(frozen=True)
class FvState:
    u: DensityField
    v: DensityField
    t: float = 0.0
    dt_last: float = 0.0


def _conservative_clamp(values: np.ndarray) -> np.ndarray:
    """Zero out negative cells, removing the surplus from positive ones."""
    neg = values < 0.0
    if not np.any(neg):
        return values
    deficit = float(values[neg].sum())  # negative number
    out = np.where(neg, 0.0, values)
    pos_total = float(out.sum())
    if pos_total > 0.0:
        out *= (pos_total + deficit) / pos_total
    return out


def _face_pairs(values: np.ndarray, axis: int):
    n = values.shape[axis]
    lo = np.take(values, range(0, n - 1), axis=axis)
    hi = np.take(values, range(1, n), axis=axis)
    return lo, hi


def _diffusive_slopes(u: np.ndarray, axis: int, params: ModelParams, regularized: bool):
    """Interior-face diffusive flux of the porous-medium term, per unit 1/h."""
    lo, hi = _face_pairs(u, axis)
    if not regularized:
        return hi**params.p - lo**params.p
    pma = params.p - params.alpha
    m_face = mobility(0.5 * (lo + hi), params)
    return params.p / pma * m_face * (hi**pma - lo**pma)


def _max_diffusivity(u: np.ndarray, params: ModelParams, regularized: bool) -> float:
    """Largest effective diffusivity over faces, for the stability bound."""
    worst = 0.0
    for axis in range(u.ndim):
        lo, hi = _face_pairs(u, axis)
        du = hi - lo
        if not regularized:
            slope = np.where(
                np.abs(du) > 1e-12,
                (hi**params.p - lo**params.p) / np.where(np.abs(du) > 1e-12, du, 1.0),
                params.p * np.maximum(0.5 * (lo + hi), 0.0) ** (params.p - 1.0),
            )
        else:
            pma = params.p - params.alpha
            m_face = mobility(0.5 * (lo + hi), params)
            base = np.where(
                np.abs(du) > 1e-12,
                (hi**pma - lo**pma) / np.where(np.abs(du) > 1e-12, du, 1.0),
                pma * np.maximum(0.5 * (lo + hi), 1e-30) ** (pma - 1.0),
            )
            slope = params.p / pma * m_face * base
        if slope.size:
            worst = max(worst, float(np.abs(slope).max()))
    return worst


def _grad_faces(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    lo, hi = _face_pairs(values, axis)
    return (hi - lo) / h


def cfl_limit(state: FvState, params: ModelParams, regularized: bool) -> float:
    """Largest stable explicit step: CFL_SAFETY * h^2 / (D_max + chi |grad v| h)."""
    grid = state.u.grid
    h = min(grid.h)
    d_max = _max_diffusivity(state.u.values, params, regularized)
    gv = 0.0
    for axis in range(grid.dim):
        g = _grad_faces(state.v.values, axis, grid.h[axis])
        if g.size:
            gv = max(gv, float(np.abs(g).max()))
    denom = d_max + params.chi * gv * h
    if denom <= 0.0:
        return math.inf
    return CFL_SAFETY * h**2 / denom


def _upwind_drift_divergence(
    u: np.ndarray, drive: np.ndarray, grid: Grid, params: ModelParams, regularized: bool
) -> np.ndarray:
    """div(m(u) grad(drive)) with donor-cell mobility (positivity-safe)."""
    out = np.zeros_like(u)
    for axis in range(grid.dim):
        h = grid.h[axis]
        g = _grad_faces(drive, axis, h)
        lo, hi = _face_pairs(u, axis)
        if regularized:
            m_lo, m_hi = mobility(lo, params), mobility(hi, params)
        else:
            m_lo, m_hi = lo**params.alpha, hi**params.alpha
        # mass flux is -m grad(drive): positive g moves mass toward lower index
        m_up = np.where(g > 0.0, m_hi, m_lo)
        flux = m_up * g
        pad = [(0, 0)] * u.ndim
        pad[axis] = (1, 1)
        out += np.diff(np.pad(flux, pad), axis=axis) / h
    return out


def fv_step(
    state: FvState, dt: float, params: ModelParams, regularized: bool = False
) -> FvState:
    """One explicit-diffusion / upwind-drift / implicit-chemical step.

    Raises :class:`CflViolation` when ``dt`` exceeds the stability bound of
    the current state.
    """
    limit = cfl_limit(state, params, regularized)
    if dt > limit * (1.0 + 1e-12):
        raise CflViolation(f"dt={dt:.3e} exceeds CFL bound {limit:.3e}")
    grid = state.u.grid
    u = state.u.values
    v = state.v.values

    dudt = np.zeros_like(u)
    for axis in range(grid.dim):
        h = grid.h[axis]
        flux = _diffusive_slopes(u, axis, params, regularized) / h
        pad = [(0, 0)] * u.ndim
        pad[axis] = (1, 1)
        dudt += np.diff(np.pad(flux, pad), axis=axis) / h
    # the chemotactic mass flux is +chi m(u) grad v; the drift helper assumes
    # flux -m grad(drive), so drive with the negated concentration
    dudt += params.chi * _upwind_drift_divergence(u, -v, grid, params, regularized)

    u_new = u + dt * dudt
    if u_new.min() < 0.0:
        u_new = _conservative_clamp(u_new)

    rhs = DensityField(grid, v / dt + u_new)
    v_new = solve_elliptic(1.0, 1.0 + 1.0 / dt, rhs)
    return FvState(DensityField(grid, u_new), v_new, state.t + dt, dt)


def run_reference(
    u0: DensityField,
    v0: DensityField,
    dt: float | None,
    t_end: float,
    params: ModelParams,
    regularized: bool = False,
    stride: int = 1,
) -> list[FvState]:
    """March to ``t_end`` recording every ``stride``-th state (plus endpoints).

    ``dt=None`` adapts each step to 90% of the current stability bound. With
    a fixed ``dt``, a shrinking bound raises :class:`CflViolation` with the
    snapshots collected so far attached.
    """
    state = FvState(u0, v0, 0.0, 0.0)
    snapshots = [state]
    step = 0
    while state.t < t_end - 1e-14:
        if dt is None:
            dt_k = min(0.9 * cfl_limit(state, params, regularized), t_end - state.t)
        else:
            dt_k = min(dt, t_end - state.t)
        try:
            state = fv_step(state, dt_k, params, regularized)
        except CflViolation as exc:
            exc.snapshots = snapshots
            raise
        step += 1
        if step % stride == 0:
            snapshots.append(state)
    if snapshots[-1] is not state:
        snapshots.append(state)
    return snapshots


def aux_flow_step(
    w: DensityField, phi: DensityField, dt: float, params: ModelParams
) -> DensityField:
    """One step of the drift-diffusion flow d_t w = delta Lap w + div(m(w) grad phi).

    Explicit donor-cell drift under its own CFL bound, then implicit
    diffusion identical to :func:`heat_step` with one substep; mass is
    conserved exactly and undershoots below -1e-12 are clamped away
    conservatively.
    """
    if params.eps <= 0.0:
        raise ValueError("auxiliary flow needs a positive mobility regularization")
    grid = w.grid
    h = min(grid.h)
    gp_max = 0.0
    for axis in range(grid.dim):
        g = _grad_faces(phi.values, axis, grid.h[axis])
        if g.size:
            gp_max = max(gp_max, float(np.abs(g).max()))
    speed = gp_max * params.alpha / params.eps ** (1.0 - params.alpha)
    if speed > 0.0 and dt > CFL_SAFETY * h / speed * (1.0 + 1e-12):
        raise CflViolation(
            f"dt={dt:.3e} exceeds drift CFL bound {CFL_SAFETY * h / speed:.3e}"
        )
    drift = _upwind_drift_divergence(w.values, phi.values, grid, params, regularized=True)
    w_star = w.values + dt * drift
    if w_star.min() < 0.0:
        w_star = _conservative_clamp(w_star)
    out = heat_step(DensityField(grid, w_star), params.delta, dt, substeps=1)
    if out.min() < -1e-12:
        out = DensityField(grid, _conservative_clamp(out.values))
    return out
