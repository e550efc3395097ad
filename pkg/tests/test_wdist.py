import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_probability
from mobflow.errors import InvalidPath, MassMismatch, NoConvergence, SingularMobility
from mobflow.grid import DensityField, FaceField, Grid
from mobflow.model import ModelParams
from mobflow.wdist import (
    ConstantMobility,
    LinearMobility,
    PowerMobility,
    TransportPath,
    action,
    potential_momentum,
    prox_action,
    recover_potential,
    solve_distance,
)


def make_path(grid, n_t, rho_values, w_interior):
    rho = tuple(DensityField(grid, r) for r in rho_values)
    mom = tuple(FaceField.from_interior(grid, [w]) for w in w_interior)
    return TransportPath(grid, n_t, rho, mom)


def constant_path(grid, n_t, level=1.0, w_level=0.0):
    n = grid.cells[0]
    rho = [np.full(n, level)] * (n_t + 1)
    w = [np.full(n - 1, w_level)] * n_t
    return make_path(grid, n_t, rho, w)


def slice_kinetic_energy(rho, w, params, mobility=None):
    """Single-slice action sum |w|^2 / m(face-avg rho) * facevol."""
    mob = mobility or PowerMobility(params.alpha, params.eps)
    grid = rho.grid
    total = 0.0
    for a in range(grid.dim):
        vals = rho.values
        n = grid.cells[a]
        lo = np.take(vals, range(0, n - 1), axis=a)
        hi = np.take(vals, range(1, n), axis=a)
        m = mob.value(0.5 * (lo + hi))
        total += float((w.interior(a) ** 2 / m).sum())
    return total * grid.cell_volume


class TestAction:
    def test_zero_momentum(self, grid64, params):
        assert action(constant_path(grid64, 4), params) == 0.0

    def test_uniform_density_constant_momentum(self, grid64):
        params = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=0.0)
        path = constant_path(grid64, 4, level=1.0, w_level=0.2)
        expected = 0.04 * 63 / 64  # interior-face fraction of the volume
        assert action(path, params) == pytest.approx(expected)

    def test_quadratic_homogeneity(self, grid64, params, rng):
        n_t = 3
        rho = [1.0 + rng.uniform(0, 1, size=64) for _ in range(n_t + 1)]
        w = [rng.normal(size=63) for _ in range(n_t)]
        a1 = action(make_path(grid64, n_t, rho, w), params)
        a2 = action(make_path(grid64, n_t, rho, [2 * x for x in w]), params)
        assert a2 == pytest.approx(4 * a1, rel=1e-12)

    def test_negative_density_rejected(self, grid64, params):
        rho = [np.full(64, 1.0), np.full(64, -0.1)]
        w = [np.zeros(63)]
        with pytest.raises(InvalidPath):
            action(make_path(grid64, 1, rho, w), params)

    def test_vacuum_with_momentum_is_infinite(self, grid64):
        params = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=0.0)
        path = constant_path(grid64, 2, level=0.0, w_level=0.1)
        assert action(path, params) == math.inf


class TestProxAction:
    def test_zero_momentum_anchor(self, params):
        rho, w = prox_action(0.7, [0.0], 0.5, params)
        assert rho == pytest.approx(0.7)
        assert np.all(w == 0.0)
        rho, _ = prox_action(-0.3, [0.0], 0.5, params)
        assert rho == 0.0

    def test_vanishing_step_is_identity(self, params):
        rho, w = prox_action(1.0, [0.5], 1e-8, params)
        assert abs(rho - 1.0) <= 1e-6
        assert abs(w[0] - 0.5) <= 1e-6

    def test_stationarity_residuals(self):
        params = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=0.1)
        rho, w = prox_action(1.0, [1.0], 0.5, params)
        m = (rho + 0.1) ** 0.5
        md = 0.5 * (rho + 0.1) ** -0.5
        assert abs(w[0] - 1.0 * m / (m + 1.0)) <= 1e-10
        assert abs(rho - 1.0 - 0.5 * w[0] ** 2 * md / m**2) <= 1e-10

    def test_against_grid_search(self):
        params = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=0.1)
        sigma = 0.5
        rho, w = prox_action(1.0, [1.0], sigma, params)

        def objective(r, ww):
            return ww**2 / (r + 0.1) ** 0.5 + ((r - 1.0) ** 2 + (ww - 1.0) ** 2) / (2 * sigma)

        rr = np.linspace(0.0, 3.0, 1201)
        ww = np.linspace(-2.0, 2.0, 1601)
        R, W = np.meshgrid(rr, ww, indexing="ij")
        vals = objective(R, W)
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        # refine around the coarse argmin
        rr2 = np.linspace(max(rr[i] - 0.005, 0), rr[i] + 0.005, 401)
        ww2 = np.linspace(ww[j] - 0.005, ww[j] + 0.005, 401)
        R2, W2 = np.meshgrid(rr2, ww2, indexing="ij")
        v2 = objective(R2, W2)
        i2, j2 = np.unravel_index(np.argmin(v2), v2.shape)
        assert abs(rho - rr2[i2]) <= 1e-4
        assert abs(w[0] - ww2[j2]) <= 1e-4

    def test_multicomponent_momentum(self, params):
        rho, w = prox_action(0.8, [0.3, -0.4], 0.2, params)
        assert w.shape == (2,)
        m = (rho + params.eps) ** params.alpha
        shrink = m / (m + 0.4)
        assert np.allclose(w, np.array([0.3, -0.4]) * shrink, atol=1e-12)

    def test_needs_regularization_without_hook(self):
        bare = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=0.0)
        with pytest.raises(SingularMobility):
            prox_action(1.0, [1.0], 0.5, bare)
        rho, w = prox_action(1.0, [1.0], 0.5, bare, mobility=LinearMobility())
        assert rho > 1.0  # loaded slot pulls density up for linear mobility

    def test_bare_power_mobility_prox(self):
        # eps = 0 power mobility: the derivative blows up at 0, so the root
        # finder has to expand its own bracket; the stationarity conditions
        # must still hold at the interior optimum
        mob = PowerMobility(0.5, 0.0)
        bare = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=0.0)
        for rho_t, w_t, sigma in [(1.0, 1.0, 0.5), (0.0, 0.5, 0.2), (2.0, -1.0, 1.0)]:
            rho, w = prox_action(rho_t, [w_t], sigma, bare, mobility=mob)
            assert rho > 0.0
            m = rho**0.5
            md = 0.5 * rho**-0.5
            assert abs(w[0] - w_t * m / (m + 2 * sigma)) <= 1e-9
            assert abs(rho - rho_t - sigma * w[0] ** 2 * md / m**2) <= 1e-9

    @settings(max_examples=40, deadline=None)
    @given(
        st.floats(-1.0, 3.0),
        st.floats(-2.0, 2.0),
        st.floats(0.01, 2.0),
    )
    def test_stationarity_property(self, rho_t, w_t, sigma):
        params = ModelParams(p=1.5, alpha=0.6, chi=1.0, dim=1, eps=0.05)
        rho, w = prox_action(rho_t, [w_t], sigma, params)
        assert rho >= 0.0
        m = (rho + 0.05) ** 0.6
        assert abs(w[0] - w_t * m / (m + 2 * sigma)) <= 1e-9 * max(1.0, abs(w_t))
        if rho > 1e-12:  # interior stationarity
            md = 0.6 * (rho + 0.05) ** -0.4
            resid = rho - rho_t - sigma * (w[0] ** 2) * md / m**2
            assert abs(resid) <= 1e-9 * max(1.0, abs(rho_t))


class TestSolveDistance:
    def test_identical_endpoints(self, grid64, params):
        mu = DensityField(grid64, np.ones(64))
        res = solve_distance(mu, mu, params, n_t=4)
        assert res.value == 0.0
        assert res.path.mass_error() <= 1e-12

    def test_h_minus_one_oracle_small(self, params):
        g = Grid((1.0,), (32,))
        x = g.axis_centers(0)
        mu0 = DensityField(g, np.ones(32))
        mu1 = DensityField(g, 1 + 0.1 * np.cos(np.pi * x))
        res = solve_distance(mu0, mu1, params, n_t=8, tol=1e-7, mobility=ConstantMobility(1.0))
        assert res.value**2 == pytest.approx(0.005 / np.pi**2, rel=0.02)

    def test_symmetry(self, params, rng):
        g = Grid((1.0,), (32,))
        a = make_probability(g, rng)
        b = make_probability(g, rng)
        r_ab = solve_distance(a, b, params, n_t=8, tol=1e-7)
        r_ba = solve_distance(b, a, params, n_t=8, tol=1e-7)
        assert abs(r_ab.value - r_ba.value) <= 2e-4

    def test_triangle_inequality(self, params, rng):
        g = Grid((1.0,), (32,))
        a, b, c = (make_probability(g, rng) for _ in range(3))
        w_ab = solve_distance(a, b, params, n_t=8, tol=1e-7).value
        w_bc = solve_distance(b, c, params, n_t=8, tol=1e-7).value
        w_ac = solve_distance(a, c, params, n_t=8, tol=1e-7).value
        assert w_ac <= w_ab + w_bc + 3e-4

    def test_monotone_in_regularization(self, params, rng):
        g = Grid((1.0,), (32,))
        a = make_probability(g, rng)
        b = make_probability(g, rng)
        values = [
            solve_distance(a, b, params.with_eps(eps), n_t=8, tol=1e-7).value
            for eps in (0.02, 0.2)
        ]
        assert values[0] >= values[1] - 2e-4

    def test_bare_mobility_with_positive_endpoints(self, rng):
        # eps = 0 is admissible when both endpoints are strictly positive;
        # the unregularized distance dominates every regularized one
        g = Grid((1.0,), (32,))
        a = make_probability(g, rng)
        b = make_probability(g, rng)
        bare = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=0.0)
        res = solve_distance(a, b, bare, n_t=8, tol=1e-6)
        assert res.value > 0
        assert res.path.continuity_residual() <= 1e-9
        reg = solve_distance(a, b, bare.with_eps(0.05), n_t=8, tol=1e-6)
        assert res.value >= reg.value - 2e-4

    def test_path_invariants(self, params, rng):
        g = Grid((1.0,), (32,))
        a = make_probability(g, rng)
        b = make_probability(g, rng)
        res = solve_distance(a, b, params, n_t=8, tol=1e-6)
        assert res.path.mass_error() <= 1e-8
        assert res.path.continuity_residual() <= 1e-10
        for mom in res.path.mom:
            assert mom.components[0][0] == 0.0 and mom.components[0][-1] == 0.0
        assert res.value**2 == pytest.approx(action(res.path, params), rel=1e-12)

    def test_best_objective_monotone(self, params, rng):
        from mobflow.wdist import _DynamicSolver

        g = Grid((1.0,), (32,))
        a = make_probability(g, rng)
        b = make_probability(g, rng)
        solver = _DynamicSolver(
            g, 8, a.values, b.values, PowerMobility(0.5, 1e-2),
            obj_scale=8 / g.cell_volume, max_iter=600, tol=1e-12,
        )
        solver.solve()
        objs = [o for _, o in solver.monitor]
        assert all(b2 <= a2 + 1e-8 for a2, b2 in zip(objs, objs[1:]))

    def test_mass_mismatch(self, grid64, params):
        a = DensityField(grid64, np.ones(64))
        b = DensityField(grid64, 2 * np.ones(64))
        with pytest.raises(MassMismatch):
            solve_distance(a, b, params)

    def test_bare_mobility_needs_positive_endpoints(self, grid64):
        bare = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=0.0)
        a = DensityField(grid64, np.ones(64))
        hole = np.ones(64)
        hole[10] = 0.0
        b = DensityField(grid64, hole / (hole.sum() / 64))
        with pytest.raises(SingularMobility):
            solve_distance(a, b, bare)

    def test_iteration_cap_reports_best(self, params, rng):
        g = Grid((1.0,), (32,))
        a = make_probability(g, rng)
        b = make_probability(g, rng)
        with pytest.raises(NoConvergence) as info:
            solve_distance(a, b, params, n_t=4, max_iter=3, tol=1e-14, raise_on_cap=True)
        assert info.value.best is not None
        assert info.value.best.path.continuity_residual() <= 1e-10

    def test_2d_distance(self, rng):
        params = ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=2, eps=0.05)
        g = Grid((1.0, 1.0), (16, 16))
        a = make_probability(g, rng)
        b = make_probability(g, rng)
        res = solve_distance(a, b, params, n_t=4, tol=1e-6)
        assert res.value > 0
        assert res.path.mass_error() <= 1e-8
        assert res.path.continuity_residual() <= 1e-9

    def test_concurrent_solves_match_serial(self, params, rng):
        # instances are independent: concurrent runs reproduce serial values
        from concurrent.futures import ThreadPoolExecutor

        g = Grid((1.0,), (32,))
        pairs = [(make_probability(g, rng), make_probability(g, rng)) for _ in range(4)]
        serial = [solve_distance(a, b, params, n_t=8, tol=1e-7).value for a, b in pairs]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(
                pool.map(lambda ab: solve_distance(*ab, params, n_t=8, tol=1e-7).value, pairs)
            )
        assert parallel == serial


class TestRecoverPotential:
    def test_consistency_with_known_potential(self, params, rng):
        g = Grid((1.0,), (32,))
        rho = make_probability(g, rng)
        psi = DensityField(g, np.sin(2 * np.pi * g.axis_centers(0)))
        w = potential_momentum(rho, psi, params)
        phi = recover_potential(rho, w, params)
        assert np.abs(phi.values - (psi.values - psi.values.mean())).max() <= 1e-9

    def test_zero_momentum(self, grid64, params):
        rho = DensityField(grid64, np.ones(64))
        phi = recover_potential(rho, FaceField.zeros(grid64), params)
        assert np.abs(phi.values).max() <= 1e-12

    def test_substitution_never_increases_action(self, params, rng):
        g = Grid((1.0,), (32,))
        for _ in range(5):
            rho = make_probability(g, rng)
            w = FaceField.from_interior(g, [rng.normal(size=31)])
            phi = recover_potential(rho, w, params)
            sub = potential_momentum(rho, phi, params)
            before = slice_kinetic_energy(rho, w, params)
            after = slice_kinetic_energy(rho, sub, params)
            assert after <= before + 1e-8

    def test_path_substitution_never_increases_action(self, params, rng):
        g = Grid((1.0,), (32,))
        a = make_probability(g, rng)
        b = make_probability(g, rng)
        res = solve_distance(a, b, params, n_t=4, tol=1e-6)
        total_before = action(res.path, params)
        total_after = 0.0
        dt = res.path.dt
        for k in range(res.path.n_t):
            avg = DensityField(
                g, 0.5 * (res.path.rho[k].values + res.path.rho[k + 1].values)
            )
            phi = recover_potential(avg, res.path.mom[k], params)
            sub = potential_momentum(avg, phi, params)
            total_after += dt * slice_kinetic_energy(avg, sub, params)
        assert total_after <= total_before + 1e-8
