import json

import numpy as np
import pytest

from mobflow.diagnostics import (
    Thresholds,
    apriori_norms,
    build_report,
    check_conservation,
    check_energy_monotone,
    compare_trajectories,
    cosine_test_functions,
    equicontinuity_fit,
    gradient_exponent,
    load_states,
    weak_residual,
)
from mobflow.errors import BadExponent, GridMismatch
from mobflow.grid import DensityField, Grid
from mobflow.jko import StepControls, run_trajectory
from mobflow.model import ModelParams
from mobflow.reference import run_reference

FAST = StepControls(n_t=4, max_iter=1500, tol=1e-7)


@pytest.fixture
def grid32():
    return Grid((1.0,), (32,))


@pytest.fixture
def steady_traj(grid32, params):
    ones = DensityField(grid32, np.ones(32))
    return run_trajectory(ones, ones, 1e-3, 3e-3, params, FAST)


@pytest.fixture
def moving_traj(grid32, params):
    x = grid32.axis_centers(0)
    uv = 1 + 0.2 * np.cos(np.pi * x)
    u0 = DensityField(grid32, uv / uv.mean())
    v0 = DensityField(grid32, 1 + 0.2 * np.cos(np.pi * x))
    return run_trajectory(u0, v0, 1e-3, 5e-3, params, FAST)


class TestHardChecks:
    def test_steady_energy_monotone(self, steady_traj):
        ok, worst = check_energy_monotone(steady_traj)
        assert ok and worst <= 1e-12

    def test_moving_energy_monotone(self, moving_traj):
        ok, _ = check_energy_monotone(moving_traj)
        assert ok

    def test_perturbed_ledger_fails(self, moving_traj):
        moving_traj.ledger[2]["E"] = moving_traj.ledger[1]["E"] + 1.0
        ok, worst = check_energy_monotone(moving_traj)
        assert not ok and worst >= 1.0

    def test_conservation(self, moving_traj):
        ok, mass_err, min_u = check_conservation(moving_traj)
        assert ok and mass_err <= 1e-8 and min_u >= -1e-10

    def test_conservation_negative_control(self, moving_traj):
        moving_traj.ledger[1]["mass"] = 1.5
        ok, _, _ = check_conservation(moving_traj)
        assert not ok


class TestEquicontinuity:
    def test_steady_constant_is_zero(self, steady_traj):
        pairs = [(0.0, 0.003), (0.001, 0.002), (0.0, 0.002), (0.001, 0.003), (0.0, 0.001)]
        assert equicontinuity_fit(steady_traj, pairs, n_t=4) == 0.0

    def test_moving_constant_finite(self, moving_traj):
        pairs = [(0.0, 0.005), (0.001, 0.004), (0.002, 0.005), (0.0, 0.003), (0.001, 0.005)]
        c4 = equicontinuity_fit(moving_traj, pairs, n_t=4)
        assert 0.0 < c4 < np.inf

    def test_needs_enough_pairs(self, steady_traj):
        with pytest.raises(ValueError):
            equicontinuity_fit(steady_traj, [(0.0, 0.001)])


class TestAprioriNorms:
    def test_exponent_value(self):
        # q = 4/(3 alpha + 1 - p); the covered window keeps it in (1, 2]
        p = ModelParams(p=1.5, alpha=0.9, chi=1.0, dim=1, eps=0.1)
        assert gradient_exponent(p) == pytest.approx(4.0 / 2.2)
        assert 1.0 < gradient_exponent(p) <= 2.0

    def test_exponent_out_of_range(self):
        p = ModelParams(p=2.0, alpha=0.3, chi=1.0, dim=1, eps=0.1)
        with pytest.raises(BadExponent):
            gradient_exponent(p)

    def test_steady_run_first_order_terms_vanish(self, steady_traj):
        norms = apriori_norms(steady_traj)
        assert norms["int_grad_power_sq"] == 0.0
        assert norms["int_grad_mobility_q"] == 0.0
        assert norms["int_elliptic_defect_sq"] <= 1e-18
        assert norms["bounded"]

    def test_moving_run_reports_finite_budgets(self, moving_traj):
        norms = apriori_norms(moving_traj)
        assert norms["bounded"]
        assert norms["int_grad_power_sq"] > 0.0
        assert len(norms["per_step"]) == len(moving_traj.states)

    def test_budgets_grow_at_most_linearly_in_horizon(self, grid32, params):
        # the time integrals obey int <= C (1 + T): the fitted C must sit in a
        # factor-2 band across a horizon ladder
        x = grid32.axis_centers(0)
        uv = 1 + 0.3 * np.cos(np.pi * x)
        u0 = DensityField(grid32, uv / uv.mean())
        v0 = DensityField(grid32, 1 + 0.3 * np.cos(np.pi * x))
        fits = []
        for t_end in (0.05, 0.1, 0.2):
            traj = run_trajectory(u0, v0, 2e-3, t_end, params, FAST)
            norms = apriori_norms(traj)
            budget = norms["int_grad_power_sq"] + norms["int_elliptic_defect_sq"]
            fits.append(budget / (1.0 + t_end))
        assert max(fits) / min(fits) <= 2.0


class TestWeakResidual:
    def test_steady_residuals_vanish(self, steady_traj):
        res = weak_residual(steady_traj)
        assert res["u_residual_max"] <= 1e-12
        assert res["v_residual_max"] <= 1e-12

    def test_v_equation_is_exact(self, moving_traj):
        res = weak_residual(moving_traj)
        assert res["v_residual_max"] <= 1e-6

    def test_window_regime_flux_form(self, grid32):
        # p != 1 + alpha selects the direct power-gradient flux form
        p = ModelParams(p=1.5, alpha=0.9, chi=1.0, dim=1, eps=1e-2)
        x = grid32.axis_centers(0)
        uv = 1 + 0.2 * np.cos(np.pi * x)
        u0 = DensityField(grid32, uv / uv.mean())
        v0 = DensityField(grid32, 1 + 0.2 * np.cos(np.pi * x))
        traj = run_trajectory(u0, v0, 1e-3, 3e-3, p, FAST)
        res = weak_residual(traj)
        assert np.isfinite(res["u_residual_max"])
        assert res["v_residual_max"] <= 1e-6

    def test_test_functions_have_zero_normal_gradient(self, grid32):
        from mobflow.grid import discrete_gradient

        for phi in cosine_test_functions(grid32):
            g = discrete_gradient(phi)
            assert g.components[0][0] == 0.0 and g.components[0][-1] == 0.0

    def test_2d_mode_count(self):
        g = Grid((1.0, 1.0), (8, 8))
        assert len(cosine_test_functions(g, max_mode=2)) == 8


class TestCompare:
    def test_identical_trajectories(self, moving_traj):
        comp = compare_trajectories(moving_traj, moving_traj)
        assert comp["u_diff_max"] == 0.0
        assert comp["v_diff_max"] == 0.0

    def test_steady_jko_matches_steady_reference(self, grid32, params, steady_traj):
        ones = DensityField(grid32, np.ones(32))
        snaps = run_reference(ones, ones, None, 0.003, params, False)
        comp = compare_trajectories(steady_traj, snaps)
        assert comp["u_diff_max"] <= 1e-6
        assert comp["v_diff_max"] <= 1e-6

    def test_grid_mismatch(self, moving_traj, params):
        other = Grid((1.0,), (16,))
        ones = DensityField(other, np.ones(16))
        snaps = run_reference(ones, ones, None, 0.001, params, False)
        with pytest.raises(GridMismatch):
            compare_trajectories(moving_traj, snaps)


class TestReport:
    def test_build_and_flags(self, moving_traj):
        rep = build_report(moving_traj)
        assert rep.passed
        assert set(rep.flags) == {
            "energy_monotone",
            "conservation",
            "norms_bounded",
            "v_equation_exact",
        }
        assert rep.fitted["sup_norm_bound"] > 0
        assert len(rep.table) == len(moving_traj.states)

    def test_save_is_deterministic(self, moving_traj, tmp_path):
        rep = build_report(moving_traj)
        rep.save(tmp_path / "a")
        rep.save(tmp_path / "b")
        a = (tmp_path / "a" / "report.json").read_bytes()
        b = (tmp_path / "b" / "report.json").read_bytes()
        assert a == b
        payload = json.loads(a)
        assert payload["passed"] is True

    def test_custom_thresholds_can_fail(self, moving_traj):
        strict = Thresholds(v_residual=1e-30)
        rep = build_report(moving_traj, thresholds=strict)
        assert not rep.flags["v_equation_exact"]

    def test_saved_states_loadable(self, moving_traj, tmp_path):
        moving_traj.save(tmp_path / "run")
        triples = load_states(tmp_path / "run")
        assert len(triples) == len(moving_traj.states)
        t0, u0, v0 = triples[0]
        assert t0 == 0.0
        assert np.array_equal(u0.values, moving_traj.states[0].u.values)
