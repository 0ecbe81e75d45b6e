import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from olfc.dispatch import CostModel, optimal_dispatch, steady_state_frequency, total_cost
from olfc.errors import ValidationError
from olfc.network import AreaParams, Network, NetworkTopology

from conftest import LAMBDA_OPT, ORACLE_SAVINGS_PCT, P_T_OPT

TABLE_Q = np.array([2.42e4, 3.78e4, 3.31e4, 2.75e4])
TABLE_DPD = np.array([0.010, 0.015, 0.012, 0.014])


def qp_by_elimination(Q, Rlin, P_d):
    """Equality-constrained QP oracle: eliminate the last variable through
    the balance constraint and solve the first-order conditions."""
    n = Q.shape[0]
    s = P_d.sum()
    # minimize 0.5 p'Qp + R'p  s.t. 1'p = s; substitute p_n = s - sum(p_1..p_{n-1})
    A = np.diag(Q[:n - 1]) + Q[n - 1] * np.ones((n - 1, n - 1))
    b = Q[n - 1] * s * np.ones(n - 1) - Rlin[:n - 1] + Rlin[n - 1]
    head = np.linalg.solve(A, b)
    return np.append(head, s - head.sum())


def qp_by_projected_gradient(Q, Rlin, P_d, iters=200_000, tol=1e-14):
    """Projected-gradient oracle on the balance hyperplane."""
    n = Q.shape[0]
    p = np.full(n, P_d.sum() / n)
    tau = 0.9 / Q.max()
    for _ in range(iters):
        g = Q * p + Rlin
        g = g - g.mean()  # project gradient onto {1'x = 0}
        p_new = p - tau * g
        if np.abs(p_new - p).max() < tol:
            return p_new
        p = p_new
    return p


class TestTotalCost:
    def test_zero_generation_gives_offsets(self):
        model = CostModel(Q=np.array([1.0, 2.0]), Rlin=0.0, C0=np.array([3.0, 4.0]))
        assert total_cost(np.zeros(2), model) == 7.0

    def test_area_one_table_value(self):
        model = CostModel(Q=np.array([2.42e4]), Rlin=0.0, C0=0.0)
        assert abs(total_cost(np.array([0.01]), model) - 1.21) < 1e-12

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_convexity_midpoint(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(1, 6)
        model = CostModel(Q=rng.uniform(0.1, 5.0, n), Rlin=rng.normal(0, 1, n), C0=rng.normal(0, 1, n))
        a, b = rng.normal(0, 1, n), rng.normal(0, 1, n)
        mid = total_cost((a + b) / 2, model)
        assert mid <= (total_cost(a, model) + total_cost(b, model)) / 2 + 1e-12

    def test_nonconvex_model_rejected(self):
        with pytest.raises(ValidationError, match="cost.Q-strictly-positive"):
            CostModel(Q=np.array([1.0, 0.0]), Rlin=0.0, C0=0.0)


class TestOptimalDispatch:
    def test_identical_costs_split_equally(self):
        model = CostModel(Q=np.full(4, 2.0), Rlin=0.0, C0=0.0)
        disp = optimal_dispatch(np.array([0.4, 0.0, 0.0, 0.0]), model)
        assert np.allclose(disp.P_t_opt, 0.1)

    def test_case_study_frozen_targets(self):
        model = CostModel(Q=TABLE_Q, Rlin=0.0, C0=0.0)
        disp = optimal_dispatch(TABLE_DPD, model)
        assert abs(disp.lambda_opt - LAMBDA_OPT) < 1e-10
        assert np.abs(disp.P_t_opt - P_T_OPT).max() < 1e-15
        # shares proportional to 1/Q, total 0.051
        assert abs(disp.P_t_opt.sum() - 0.051) < 1e-15
        assert np.allclose(disp.P_t_opt * TABLE_Q, disp.lambda_opt)

    def test_case_study_against_both_oracles(self):
        p_elim = qp_by_elimination(TABLE_Q, np.zeros(4), TABLE_DPD)
        p_pg = qp_by_projected_gradient(TABLE_Q, np.zeros(4), TABLE_DPD)
        model = CostModel(Q=TABLE_Q, Rlin=0.0, C0=0.0)
        disp = optimal_dispatch(TABLE_DPD, model)
        assert np.abs(disp.P_t_opt - p_elim).max() < 1e-8
        assert np.abs(disp.P_t_opt - p_pg).max() < 1e-8

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_random_instances_match_elimination_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        Q = rng.uniform(0.05, 10.0, n)
        Rlin = rng.normal(0.0, 2.0, n)
        P_d = rng.normal(0.0, 1.0, n)
        model = CostModel(Q=Q, Rlin=Rlin, C0=rng.normal(0, 1, n))
        disp = optimal_dispatch(P_d, model, plausibility_bound=np.inf)
        oracle = qp_by_elimination(Q, Rlin, P_d)
        assert np.abs(disp.P_t_opt - oracle).max() < 1e-8
        assert abs(disp.P_t_opt.sum() - P_d.sum()) < 1e-9
        marg = Q * disp.P_t_opt + Rlin
        assert (marg.max() - marg.min()) <= 1e-12 * max(1.0, abs(marg.max()))

    def test_offset_invariance(self):
        rng = np.random.default_rng(11)
        Q, Rlin, P_d = rng.uniform(0.5, 3, 4), rng.normal(0, 1, 4), rng.normal(0, 1, 4)
        d1 = optimal_dispatch(P_d, CostModel(Q=Q, Rlin=Rlin, C0=0.0))
        d2 = optimal_dispatch(P_d, CostModel(Q=Q, Rlin=Rlin, C0=123.4))
        assert np.array_equal(d1.P_t_opt, d2.P_t_opt)
        assert d1.lambda_opt == d2.lambda_opt

    def test_local_optimality_probe(self):
        model = CostModel(Q=TABLE_Q, Rlin=0.0, C0=0.0)
        disp = optimal_dispatch(TABLE_DPD, model)
        base = total_cost(disp.P_t_opt, model)
        rng = np.random.default_rng(5)
        for _ in range(50):
            i, j = rng.choice(4, 2, replace=False)
            eps = rng.uniform(1e-4, 1e-2) * rng.choice([-1, 1])
            p = disp.P_t_opt.copy()
            p[i] += eps
            p[j] -= eps  # repair balance
            assert total_cost(p, model) > base

    def test_plausibility_flag(self):
        model = CostModel(Q=np.array([1.0, 1.0]), Rlin=0.0, C0=0.0)
        assert optimal_dispatch(np.array([0.4, 0.4]), model).within_plausible_bounds
        assert not optimal_dispatch(np.array([4.0, 4.0]), model).within_plausible_bounds

    def test_savings_oracle_value(self):
        model = CostModel(Q=TABLE_Q, Rlin=0.0, C0=0.0)
        disp = optimal_dispatch(TABLE_DPD, model)
        savings = 100.0 * (1.0 - total_cost(disp.P_t_opt, model) / total_cost(TABLE_DPD, model))
        assert abs(savings - ORACLE_SAVINGS_PCT) < 1e-9


def gentle_two_area():
    """Open-loop stable pair (moderate K_p) for fixed-input simulations."""
    areas = [AreaParams(T_p=20.0, T_t=0.3, T_g=0.08, T_V=6.0, K_p=10.0, R=2.5,
                        X_d=1.85, X_d_prime=0.25),
             AreaParams(T_p=22.0, T_t=0.33, T_g=0.072, T_V=6.5, K_p=11.0, R=2.7,
                        X_d=1.84, X_d_prime=0.24)]
    return Network(areas, NetworkTopology(n=2, lines=((0, 1, -5.4),)))


class TestSteadyStateFrequency:
    def test_balanced_input_gives_zero(self, case_scenario):
        net = case_scenario.network
        u = np.array([0.02, 0.01, 0.0, 0.03])
        assert steady_state_frequency(u, u, net) == 0.0

    def test_case_study_formula_value(self, case_scenario):
        net = case_scenario.network
        f_star = steady_state_frequency(np.full(4, 0.01), np.zeros(4), net)
        denom = np.sum(1.0 / net.K_p + 1.0 / net.R)
        assert abs(denom - 1.5464853050901481) < 1e-12
        assert abs(f_star - 0.04 / denom) < 1e-15
        assert abs(f_star - 0.025865101898054122) < 1e-12

    @given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.floats(0.1, 3.0))
    @settings(max_examples=40, deadline=None)
    def test_linearity(self, a, b, c):
        net = gentle_two_area()
        u1, d1 = np.array([a, b]), np.array([b, a])
        f1 = steady_state_frequency(u1, d1, net)
        f2 = steady_state_frequency(c * u1, c * d1, net)
        assert abs(f2 - c * f1) < 1e-12 * max(1.0, abs(f1))

    def test_long_horizon_simulation_oracle(self):
        # constant setpoint, no secondary control, open-loop-stable network
        import olfc._kernels as _k
        from olfc.controller import ControllerConfig
        from olfc.dispatch import CostModel
        from olfc.simulate import Scenario, _pack_params, _pack_state, initial_state

        net = gentle_two_area()
        cfg = ControllerConfig(M1=3.0, M2=1.0, M3=0.1, W_max=10.0, alpha_star=1.0,
                               T_theta=0.33, cost=CostModel(Q=np.array([2.0, 3.0]), Rlin=0.0, C0=0.0),
                               com_edges=((0, 1),))
        scen = Scenario(network=net, controller=cfg, baseline=np.zeros(2), events=())
        state, memory = initial_state(scen)
        u_bar = np.array([0.012, 0.008])
        params = _pack_params(net, cfg)
        y = _pack_state(state, net, 0, False)
        dt, n_steps, stride = 1e-3, 300_000, 10_000
        K = n_steps // stride + 1
        out_t = np.empty(K)
        out_y = np.empty((K, y.shape[0]))
        outs = [np.empty((K, 2)) for _ in range(5)]
        status = _k.run_loop(y, u_bar.copy(), np.zeros(2), memory.xi1_max, memory.sigma_prev,
                             memory.sigma_prev2, memory.alpha, memory.w, cfg.variant_code, params,
                             cfg.M1, cfg.M2, cfg.M3, cfg.M4, cfg.alpha_star, np.zeros(2),
                             cfg.eps_peak, np.empty(0, np.int64), np.zeros((0, 2)),
                             dt, n_steps, stride, out_t, out_y, *outs)
        assert status == -1
        f_end = out_y[-1, net.m:net.m + net.n]
        f_star = steady_state_frequency(u_bar, np.zeros(2), net)
        assert np.abs(f_end - f_star).max() < 1e-5
