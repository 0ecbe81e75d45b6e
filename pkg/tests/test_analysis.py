import numpy as np
import pytest

from olfc import load_scenario, run_scenario, optimal_dispatch
from olfc.analysis import (
    Thresholds,
    convergence_metrics,
    cost_savings,
    marginal_spread,
    reaching_times,
    settling_time,
    storage_S1,
    storage_S2,
    storage_S3,
)
from olfc.dispatch import CostModel, total_cost
from olfc.network import solve_equilibrium
from olfc.simulate import LoadEvent

from conftest import CASE_STUDY, ORACLE_SAVINGS_PCT


class _Snap:
    def __init__(self, eta, f, V):
        self.eta, self.f, self.V = eta, f, V


@pytest.fixture(scope="module")
def post_step_reference():
    scen = load_scenario(CASE_STUDY)
    P_d = scen.final_demand()
    disp = optimal_dispatch(P_d, scen.controller.cost)
    eq = solve_equilibrium(disp.P_t_opt, scen.network, P_d=P_d)
    return scen, disp, eq


class TestStorageS1:
    def test_zero_at_reference(self, post_step_reference):
        scen, _, eq = post_step_reference
        val = storage_S1(_Snap(eq.eta, np.zeros(4), eq.V), eq, scen.network)
        assert abs(val) < 1e-15

    def test_positive_near_reference(self, post_step_reference):
        scen, _, eq = post_step_reference
        rng = np.random.default_rng(0)
        for _ in range(200):
            snap = _Snap(eq.eta + rng.normal(0, 1e-3, 4), rng.normal(0, 1e-3, 4),
                         eq.V + rng.normal(0, 1e-3, 4))
            assert storage_S1(snap, eq, scen.network) > 0.0

    def test_hessian_positive_definite(self, post_step_reference):
        # finite-difference Hessian of the Bregman distance at the reference
        scen, _, eq = post_step_reference
        net = scen.network
        x0 = np.concatenate([eq.eta, np.zeros(4), eq.V])

        def val(x):
            return storage_S1(_Snap(x[:4], x[4:8], x[8:]), eq, net)

        h = 1e-5
        n = x0.size
        H = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                xpp, xpm, xmp, xmm = (x0.copy() for _ in range(4))
                xpp[i] += h; xpp[j] += h
                xpm[i] += h; xpm[j] -= h
                xmp[i] -= h; xmp[j] += h
                xmm[i] -= h; xmm[j] -= h
                H[i, j] = (val(xpp) - val(xpm) - val(xmp) + val(xmm)) / (4 * h * h)
        H = 0.5 * (H + H.T)
        assert np.linalg.eigvalsh(H).min() > 0.0


class TestStorageS2S3:
    def test_zero_at_optimum_and_quadratic_scaling(self, post_step_reference):
        scen, disp, _ = post_step_reference
        cfg, net = scen.controller, scen.network
        ref = (disp.P_t_opt, disp.P_t_opt)
        assert storage_S2(disp.P_t_opt, disp.P_t_opt, ref, cfg, net) == 0.0
        d = np.array([1e-3, -2e-3, 5e-4, 5e-4])
        s1 = storage_S2(disp.P_t_opt + d, disp.P_t_opt - d, ref, cfg, net)
        s2 = storage_S2(disp.P_t_opt + 2 * d, disp.P_t_opt - 2 * d, ref, cfg, net)
        assert s1 > 0.0
        assert abs(s2 - 4.0 * s1) < 1e-12 * max(1.0, s2)

    def test_s3_zero_and_quadratic(self):
        v_b, lam_b = np.array([0.1, 0.2, 0.3]), np.array([1.0, 1.0, 1.0, 1.0])
        assert storage_S3(v_b, lam_b, (v_b, lam_b)) == 0.0
        dv = np.array([1e-2, 0, 0])
        s1 = storage_S3(v_b + dv, lam_b, (v_b, lam_b))
        s2 = storage_S3(v_b + 2 * dv, lam_b, (v_b, lam_b))
        assert abs(s2 - 4 * s1) < 1e-15


class TestTrajectoryMetrics:
    def test_no_event_run_settles_immediately(self):
        scen = load_scenario(CASE_STUDY)
        scen.events = ()
        scen.t_end = 6.0
        traj = run_scenario(scen)
        t_star, conclusive = settling_time(traj, 1e-3, 5.0)
        assert t_star == 0.0 and conclusive
        assert np.all(reaching_times(traj, 1e-3) == 0.0)
        disp = optimal_dispatch(scen.final_demand(), scen.controller.cost)
        rep = convergence_metrics(traj, disp)
        assert rep.dispatch_error < 1e-12
        assert rep.criteria["frequency-settling"]

    def test_short_window_is_inconclusive(self):
        scen = load_scenario(CASE_STUDY)
        scen.t_end = 2.0
        traj = run_scenario(scen)
        disp = optimal_dispatch(scen.final_demand(), scen.controller.cost)
        rep = convergence_metrics(traj, disp)
        assert not rep.settling_conclusive
        assert not rep.criteria["frequency-settling"]

    def test_case_study_report_passes_everything(self, case_run):
        _, _, _, report = case_run
        assert report.passed, report.to_text()

    def test_marginal_consensus_and_balance_at_convergence(self, case_run):
        scen, traj, _, report = case_run
        assert marginal_spread(traj.theta[-1], scen.controller.cost) < 1e-6 * report.lambda_opt
        assert abs(traj.P_t[-1].sum() - traj.P_d[-1].sum()) < 1e-6

    def test_storage_series_attached_and_monotone_after_reaching(self, case_run):
        scen, traj, _, report = case_run
        S = traj.diagnostics["S_total"]
        start = int(np.searchsorted(traj.t, report.reaching_time_overall + scen.dt))
        inc = np.diff(S[start:])
        assert inc.max() <= 1e-8 * S[start:].max()
        assert report.lyapunov_violations == 0

    def test_report_serializes(self, case_run):
        import json
        _, _, _, report = case_run
        blob = json.dumps(report.to_dict(), sort_keys=True)
        assert "criteria" in blob
        text = report.to_text()
        assert "PASS" in text and "overall" in text


class TestCostSavings:
    def test_uniform_costs_and_demand_give_zero(self):
        from dataclasses import replace
        scen = load_scenario(CASE_STUDY)
        scen.events = (LoadEvent(time=0.1, delta=np.full(4, 0.01)),)
        scen.t_end = 8.0
        scen.controller = replace(scen.controller, cost=CostModel(Q=np.full(4, 3.0e4), Rlin=0.0, C0=0.0))
        traj = run_scenario(scen)
        savings = cost_savings(traj, scen.controller.cost)
        assert savings is not None and abs(savings) < 1e-4

    def test_zero_reference_cost_is_undefined(self, case_run):
        _, traj, _, _ = case_run
        assert cost_savings(traj, traj.scenario.controller.cost,
                            own_demand_reference=np.zeros(4)) is None

    def test_case_study_matches_closed_form(self, case_run):
        _, traj, _, report = case_run
        assert abs(report.oracle_savings_pct - ORACLE_SAVINGS_PCT) < 1e-9
        assert abs(report.cost_savings_pct - ORACLE_SAVINGS_PCT) < 1e-3
        assert report.savings_in_band  # inside the 5..15 percent plausibility band


class TestSigmaDotAgreement:
    def test_central_difference_converges_under_dt_halving(self):
        def fd_err(dt):
            scen = load_scenario(CASE_STUDY)
            scen.t_end = 2.2
            scen.dt = dt
            scen.record_stride = 10
            traj = run_scenario(scen)
            dtr = traj.t[1] - traj.t[0]
            fd = (traj.sigma[2:] - traj.sigma[:-2]) / (2 * dtr)
            err = np.abs(fd - traj.sigma_dot[1:-1])
            mask = np.abs(traj.t[1:-1] - 1.0) > 2.5 * dtr  # demand step makes sigma' jump
            return err[mask].max()

        e1, e2 = fd_err(1e-4), fd_err(5e-5)
        assert e1 <= 100.0 * 1e-4  # fitted C ~ 70
        assert e2 < 0.75 * e1
