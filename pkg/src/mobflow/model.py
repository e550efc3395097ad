"""Model parameters, mobility functions, entropy and energy functionals, regime labels.

The mobility is ``m(r) = (r + eps)**alpha`` with ``0 < alpha < 1``; setting
``eps = 0`` selects the unregularized power mobility, whose derivatives are
singular at ``r = 0``. The entropy density is the convex function vanishing
to second order at 0 whose curvature is the reciprocal mobility; its
integral drives the regularity diagnostics, and together with a potential
pairing it forms the Lyapunov functional of the auxiliary drift-diffusion
flow.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import SingularMobility
from .grid import DensityField, field_norm, gradient_energy


@dataclass(frozen=True)
class ModelParams:
    """Model tuple (p, alpha, chi, dim, eps, delta).

    ``p >= 1`` is the diffusion exponent, ``alpha`` in (0,1) the mobility
    exponent, ``chi > 0`` the chemotactic sensitivity, ``eps >= 0`` the
    mobility regularization (0 selects the bare power mobility), and
    ``delta >= 0`` the diffusivity of the auxiliary flow wherever it enters
    the diagnostics (operations that divide by it require it positive).
    """

    p: float
    alpha: float
    chi: float
    dim: int
    eps: float = 0.0
    delta: float = 1.0

    def __post_init__(self):
        if not self.p >= 1:
            raise ValueError(f"p must satisfy p >= 1, got {self.p}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0,1), got {self.alpha}")
        if not self.chi > 0:
            raise ValueError(f"chi must be positive, got {self.chi}")
        if self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")

    @property
    def internal_exponent(self) -> float:
        """Exponent p + 1 - alpha of the internal-energy power."""
        return self.p + 1.0 - self.alpha

    @property
    def energy_coefficient(self) -> float:
        """Prefactor p / (chi (p - alpha)(p + 1 - alpha)) of the internal energy."""
        return self.p / (self.chi * (self.p - self.alpha) * self.internal_exponent)

    @property
    def critical_p(self) -> float:
        """Scaling-critical diffusion exponent 1 + alpha - 2/dim."""
        return 1.0 + self.alpha - 2.0 / self.dim

    def with_eps(self, eps: float) -> "ModelParams":
        return replace(self, eps=eps)


class Regime(Enum):
    """Parameter-regime classification for global-existence coverage."""

    THM11 = "Thm11"
    THM12 = "Thm12"
    THM14_SMALL_CHI = "Thm14SmallChi"
    UNCOVERED = "Uncovered"


@dataclass(frozen=True)
class RegimeLabel:
    regime: Regime
    critical_p: float

    @property
    def covered(self) -> bool:
        return self.regime is not Regime.UNCOVERED


def classify_regime(params: ModelParams, rel_tol: float = 1e-12) -> RegimeLabel:
    """Classify (p, alpha, chi, dim) against the covered existence regimes.

    The subcritical equality case ``p = 1 + alpha`` is covered for every
    alpha; the strictly subcritical window above the scaling-critical
    exponent requires ``alpha >= (1+p)/3``; the critical exponent itself is
    covered only for ``dim >= 3``, ``alpha >= (dim-1)/dim``, and small
    sensitivity (the smallness threshold is not quantified, so the label
    records the regime and leaves chi to parameter sweeps).
    """
    p, alpha, dim = params.p, params.alpha, params.dim
    crit = params.critical_p
    scale = max(1.0, abs(p))
    if abs(p - (1.0 + alpha)) <= rel_tol * scale:
        return RegimeLabel(Regime.THM11, crit)
    if crit < p < 1.0 + alpha and alpha >= (1.0 + p) / 3.0:
        return RegimeLabel(Regime.THM12, crit)
    if abs(p - crit) <= rel_tol * scale and dim >= 3 and alpha >= (dim - 1.0) / dim:
        return RegimeLabel(Regime.THM14_SMALL_CHI, crit)
    return RegimeLabel(Regime.UNCOVERED, crit)


# ---------------------------------------------------------------------------
# Mobility and entropy
# ---------------------------------------------------------------------------


def mobility(r, params: ModelParams, order: int = 0):
    """Regularized power mobility ``(r+eps)**alpha`` or its first two derivatives.

    Accepts scalars or arrays. For ``eps = 0`` the derivatives blow up at
    ``r = 0`` and requesting them there raises :class:`SingularMobility`.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    a, eps = params.alpha, params.eps
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ValueError("mobility argument must be nonnegative")
    if order >= 1 and eps == 0.0 and np.any(r_arr == 0.0):
        raise SingularMobility("derivative of the bare power mobility at r = 0")
    base = r_arr + eps
    if order == 0:
        out = base**a
    elif order == 1:
        out = a * base ** (a - 1.0)
    else:
        out = a * (a - 1.0) * base ** (a - 2.0)
    return out if isinstance(r, np.ndarray) else float(out)


def mobility_lipschitz_bound(params: ModelParams) -> float:
    """Supremum of the mobility derivative, alpha / eps**(1-alpha), attained at 0."""
    if params.eps == 0.0:
        raise SingularMobility("the bare power mobility is not Lipschitz")
    return params.alpha / params.eps ** (1.0 - params.alpha)


def entropy_density(r, params: ModelParams):
    """Convex entropy with curvature equal to the reciprocal mobility.

    Closed form of the function vanishing with its derivative at 0 and
    satisfying ``U''(r) m(r) = 1``. Requires ``eps > 0``.
    """
    a, eps = params.alpha, params.eps
    if eps == 0.0:
        raise SingularMobility("entropy density needs a positive regularization")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ValueError("entropy argument must be nonnegative")
    out = ((r_arr + eps) ** (2.0 - a) - eps ** (2.0 - a)) / ((2.0 - a) * (1.0 - a))
    out = out - eps ** (1.0 - a) / (1.0 - a) * r_arr
    return out if isinstance(r, np.ndarray) else float(out)


def total_entropy(u: DensityField, params: ModelParams) -> float:
    """Integral of the entropy density over the domain.

    Nonnegative, and bounded by ``(1/(1-alpha)) * ||u||_{2-alpha}^{2-alpha}``
    uniformly in the regularization.
    """
    if u.min() < 0:
        raise ValueError("total_entropy needs a nonnegative field")
    return float(entropy_density(u.values, params).sum() * u.grid.cell_volume)


def aux_flow_lyapunov(u: DensityField, phi: DensityField, params: ModelParams) -> float:
    """Potential pairing plus delta-weighted entropy: <u, phi> + delta * entropy."""
    pairing = float((u.values * phi.values).sum() * u.grid.cell_volume)
    if params.delta == 0.0:
        return pairing
    return pairing + params.delta * total_entropy(u, params)


# ---------------------------------------------------------------------------
# Discrete sup-norms of potential derivatives (interior centered differences)
# ---------------------------------------------------------------------------


def _centered_gradient_sup(phi: DensityField) -> float:
    """Sup of the Euclidean gradient magnitude over interior cells."""
    grid = phi.grid
    v = phi.values
    comps = []
    inner = tuple(slice(1, -1) for _ in range(grid.dim))
    for axis in range(grid.dim):
        hi = np.take(v, range(2, grid.cells[axis]), axis=axis)
        lo = np.take(v, range(0, grid.cells[axis] - 2), axis=axis)
        g = (hi - lo) / (2.0 * grid.h[axis])
        # restrict the other axes to the interior so all components align
        if grid.dim == 2:
            other = 1 - axis
            g = np.take(g, range(1, grid.cells[other] - 1), axis=other)
        comps.append(g)
    mag = np.sqrt(sum(g**2 for g in comps)) if grid.dim == 2 else np.abs(comps[0])
    return float(mag.max()) if mag.size else 0.0


def _hessian_abs_sum_sup(phi: DensityField) -> float:
    """Sup over interior cells of the summed absolute second differences."""
    grid = phi.grid
    v = phi.values
    if grid.dim == 1:
        h = grid.h[0]
        sec = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
        return float(np.abs(sec).max()) if sec.size else 0.0
    hx, hy = grid.h
    vi = v[1:-1, 1:-1]
    d2x = (v[2:, 1:-1] - 2 * vi + v[:-2, 1:-1]) / hx**2
    d2y = (v[1:-1, 2:] - 2 * vi + v[1:-1, :-2]) / hy**2
    dxy = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (4.0 * hx * hy)
    total = np.abs(d2x) + np.abs(d2y) + 2.0 * np.abs(dxy)
    return float(total.max()) if total.size else 0.0


def aux_flow_rate_bound(phi: DensityField, params: ModelParams) -> float:
    """Nonpositive curvature bound of the auxiliary flow along transport paths.

    Combines the sup-norms of the potential gradient and Hessian with the
    extremal values of the mobility derivatives:
    ``-(1/2 delta) |grad phi|_inf^2 alpha(1-alpha)/eps^(2-2alpha)
    - |hess phi|_inf alpha/eps^(1-alpha)``.
    """
    if params.eps == 0.0:
        raise SingularMobility("rate bound needs a positive regularization")
    if params.delta <= 0.0:
        raise ValueError("rate bound needs a positive auxiliary diffusivity")
    a, eps, delta = params.alpha, params.eps, params.delta
    grad_sup = _centered_gradient_sup(phi)
    hess_sup = _hessian_abs_sum_sup(phi)
    mm2_sup = a * (1.0 - a) / eps ** (2.0 * (1.0 - a))
    m1_sup = a / eps ** (1.0 - a)
    return float(-(0.5 / delta) * grad_sup**2 * mm2_sup - hess_sup * m1_sup)


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------


def internal_energy(u: DensityField, params: ModelParams) -> float:
    """First energy term: coefficient times the (p+1-alpha) power integral."""
    q = params.internal_exponent
    return params.energy_coefficient * float((np.abs(u.values) ** q).sum() * u.grid.cell_volume)


def energy(u: DensityField, v: DensityField, params: ModelParams) -> float:
    """Free energy driving the evolution.

    Internal power term minus the cross pairing plus half the H1 norm
    squared of the chemical concentration.
    """
    vol = u.grid.cell_volume
    pairing = float((u.values * v.values).sum() * vol)
    v_h1_sq = float((v.values**2).sum() * vol) + gradient_energy(v)
    return internal_energy(u, params) - pairing + 0.5 * v_h1_sq


def energy_floor_gap(u: DensityField, v: DensityField, params: ModelParams) -> float:
    """Fitted-floor diagnostic: the constant making the coercivity bound tight.

    Returns ``alpha-weighted internal term + (1/4)||v||_H1^2 - E(u, v)``;
    the largest value over a run is the fitted lower-bound constant.
    """
    q = params.internal_exponent
    coeff = params.alpha / (params.chi * (params.p - params.alpha) * q)
    u_term = coeff * float((np.abs(u.values) ** q).sum() * u.grid.cell_volume)
    return u_term + 0.25 * field_norm(v, "H1") ** 2 - energy(u, v, params)


__all__ = [
    "ModelParams",
    "Regime",
    "RegimeLabel",
    "classify_regime",
    "mobility",
    "mobility_lipschitz_bound",
    "entropy_density",
    "total_entropy",
    "aux_flow_lyapunov",
    "aux_flow_rate_bound",
    "internal_energy",
    "energy",
    "energy_floor_gap",
]
