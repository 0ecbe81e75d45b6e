"""Post-hoc verification of simulated trajectories.

Provides the incremental (Bregman) storage functions whose monotone decay
certifies convergence, and turns a completed trajectory into a
verification report: settling and reaching times, dispatch optimality
gap, marginal-cost consensus, storage monotonicity, and cost accounting.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dispatch import CostModel, DispatchResult, optimal_dispatch, total_cost
from .network import Network, assemble_E, line_flows, solve_equilibrium
from .simulate import Trajectory


@dataclass(frozen=True)
class Thresholds:
    """Tolerances used by the verification report (all defaults pinned)."""

    freq_band: float = 1e-3          # Hz, settling band on |f_i|
    settle_hold: float = 5.0         # s the band must be held to call it settled
    sigma_band: float = 1e-3         # sliding band for reaching detection
    dispatch_tol: float = 1e-4       # p.u., final dispatch error per area
    consensus_rel: float = 1e-6      # marginal-cost spread relative to lambda_opt
    lyapunov_rel: float = 1e-8       # storage increment relative to max storage
    savings_tol_pp: float = 0.5      # percentage points vs the closed-form savings
    savings_band: tuple = (5.0, 15.0)
    u_rate_slack: float = 1e-9       # relative slack on |du| <= W_max dt
    freq_bound: float = 1.0          # guardrail |f| < 1 Hz
    v_bounds: tuple = (0.5, 1.5)     # guardrail on voltages


def storage_S1(state, reference, network: Network) -> float:
    """Incremental network storage, as a Bregman distance of

        S1(eta, f, V) = 0.5 f' (T_p / K_p) f + 0.5 V' E(eta) V

    between the state and a zero-frequency reference equilibrium.  The
    frequency term carries the K_p^-1 weight that makes S1 dissipate
    along the network dynamics; eta enters through E(eta) at both points
    and through the gradient term -Gamma(Vbar) sin(eta_bar).
    """
    eta = np.asarray(state.eta, dtype=float)
    f = np.asarray(state.f, dtype=float)
    V = np.asarray(state.V, dtype=float)
    eta_b = np.asarray(reference.eta, dtype=float)
    V_b = np.asarray(reference.V, dtype=float)
    f_b = np.asarray(getattr(reference, "f", np.zeros(network.n)), dtype=float)

    wf = network.T_p / network.K_p
    s_now = 0.5 * np.dot(f, wf * f) + 0.5 * np.dot(V, assemble_E(eta, network) @ V)
    s_ref = 0.5 * np.dot(f_b, wf * f_b) + 0.5 * np.dot(V_b, assemble_E(eta_b, network) @ V_b)
    grad_f = wf * f_b
    grad_V = assemble_E(eta_b, network) @ V_b
    grad_eta = -line_flows(eta_b, V_b, network)
    return float(s_now - s_ref - np.dot(grad_f, f - f_b) - np.dot(grad_V, V - V_b)
                 - np.dot(grad_eta, eta - eta_b))


def storage_S2(P_t, theta, reference, config, network: Network) -> float:
    """Incremental controller storage

        0.5 (P_t - P_opt)' M1^-1 M3 T_t (P_t - P_opt)
        + 0.5 (theta - theta_bar)' M1^-1 (M2 + M3) T_theta (theta - theta_bar)

    with reference = (P_opt, theta_bar)."""
    P_opt, theta_b = reference
    dP = np.asarray(P_t, dtype=float) - np.asarray(P_opt, dtype=float)
    dth = np.asarray(theta, dtype=float) - np.asarray(theta_b, dtype=float)
    wP = config.M3 * network.T_t / config.M1
    wth = (config.M2 + config.M3) * config.T_theta / config.M1
    return float(0.5 * np.dot(dP, wP * dP) + 0.5 * np.dot(dth, wth * dth))


def storage_S3(v, lam, references) -> float:
    """Additional storage of the primal-dual variant:
    0.5 |v - v_bar|^2 + 0.5 |lam - lam_bar|^2."""
    v_b, lam_b = references
    dv = np.asarray(v, dtype=float) - np.asarray(v_b, dtype=float)
    dl = np.asarray(lam, dtype=float) - np.asarray(lam_b, dtype=float)
    return float(0.5 * np.dot(dv, dv) + 0.5 * np.dot(dl, dl))


def primal_dual_reference(config, P_opt, P_d):
    """Steady-state (theta_bar, v_bar, lam_bar) of the primal-dual
    augmentation: lam_bar is the common marginal cost (coordination
    units), v_bar solves B_com v = theta_bar - P_d."""
    theta_b = np.asarray(P_opt, dtype=float)
    lam_b = config.cost.marginal(theta_b) / config.cost_scale
    Bcom = config.com_incidence()
    v_b = np.linalg.lstsq(Bcom, theta_b - np.asarray(P_d, dtype=float), rcond=None)[0]
    return theta_b, v_b, lam_b


def reaching_times(traj: Trajectory, band) -> np.ndarray:
    """Per-area reaching time: first recorded instant after which
    |sigma_i| stays below the band through the end.  inf if the band is
    never held to the end."""
    t = traj.t
    out = np.empty(traj.n_areas)
    for i in range(traj.n_areas):
        above = np.flatnonzero(np.abs(traj.sigma[:, i]) >= band)
        if above.size == 0:
            out[i] = t[0]
        elif above[-1] + 1 >= t.shape[0]:
            out[i] = np.inf
        else:
            out[i] = t[above[-1] + 1]
    return out


def settling_time(traj: Trajectory, freq_band, hold):
    """Earliest recorded time from which every |f_i| stays below the band
    to the end of the run.  Returns (time, conclusive): conclusive is
    False when the trajectory leaves less than ``hold`` seconds of margin
    to confirm the band is kept."""
    worst = np.abs(traj.f).max(axis=1)
    above = np.flatnonzero(worst >= freq_band)
    if above.size == 0:
        t_star = traj.t[0]
    elif above[-1] + 1 >= traj.t.shape[0]:
        return None, True
    else:
        t_star = traj.t[above[-1] + 1]
    conclusive = (traj.t[-1] - t_star) >= hold
    return float(t_star), bool(conclusive)


def marginal_spread(theta, model: CostModel) -> float:
    mc = model.marginal(theta)
    return float(mc.max() - mc.min())


def cost_savings(traj: Trajectory, model: CostModel, own_demand_reference=None):
    """Percent cost reduction of the final simulated dispatch versus each
    area covering its own demand increment:

        100 (1 - C(P_t(t_end)) / C(reference)).

    Returns None when the reference cost is zero (undefined)."""
    if own_demand_reference is None:
        own_demand_reference = traj.P_d[-1] - traj.scenario.baseline
    ref_cost = total_cost(own_demand_reference, model)
    if ref_cost == 0.0:
        return None
    return float(100.0 * (1.0 - total_cost(traj.P_t[-1], model) / ref_cost))


def attach_storage(traj: Trajectory, network: Network, config, references):
    """Fill trajectory diagnostics with per-record storage values and
    marginal costs.  ``references`` is a dict with keys "equilibrium"
    (object with .eta/.V), "P_opt", "theta_bar" and, for the primal-dual
    variant, "v_bar"/"lam_bar"."""
    K = traj.t.shape[0]
    S1 = np.empty(K)
    S2 = np.empty(K)
    eq = references["equilibrium"]
    P_opt = references["P_opt"]
    theta_b = references["theta_bar"]

    class _Snap:
        __slots__ = ("eta", "f", "V")

        def __init__(self, eta, f, V):
            self.eta, self.f, self.V = eta, f, V

    for k in range(K):
        S1[k] = storage_S1(_Snap(traj.eta[k], traj.f[k], traj.V[k]), eq, network)
        S2[k] = storage_S2(traj.P_t[k], traj.theta[k], (P_opt, theta_b), config, network)
    traj.diagnostics["S1"] = S1
    traj.diagnostics["S2"] = S2
    total = S1 + S2
    if traj.v is not None:
        S3 = np.array([storage_S3(traj.v[k], traj.lam[k], (references["v_bar"], references["lam_bar"]))
                       for k in range(K)])
        traj.diagnostics["S3"] = S3
        total = total + S3
    traj.diagnostics["S_total"] = total
    traj.diagnostics["marginal_costs"] = traj.theta * config.cost.Q[None, :] + config.cost.Rlin[None, :]
    return traj


@dataclass
class VerificationReport:
    """Quantitative endpoints of a run and their pass/fail status."""

    settling_time: float | None
    settling_conclusive: bool
    reaching_time: np.ndarray
    reaching_time_overall: float
    dispatch_error: float
    marginal_spread: float
    lambda_opt: float
    lyapunov_checked: bool
    lyapunov_violations: int
    lyapunov_worst_increment: float
    lyapunov_tolerance: float
    cost_savings_pct: float | None
    oracle_savings_pct: float | None
    savings_in_band: bool
    u_rate_ok: bool
    states_bounded: bool
    balance_error: float
    criteria: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.criteria.values())

    def to_dict(self):
        def clean(x):
            if isinstance(x, np.ndarray):
                return [float(v) for v in x]
            if isinstance(x, np.bool_):
                return bool(x)
            if isinstance(x, (np.floating, np.integer)):
                return float(x)
            if isinstance(x, float) and math.isinf(x):
                return "inf"
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            return x

        d = {k: clean(v) for k, v in self.__dict__.items()}
        d["passed"] = bool(self.passed)
        return d

    def to_text(self):
        lines = []
        fmt = {
            "frequency-settling": f"settling time {self.settling_time} s"
                                  + ("" if self.settling_conclusive else " (inconclusive window)"),
            "dispatch-optimality": f"max |P_t - P_opt| = {self.dispatch_error:.3e} p.u.",
            "marginal-cost-consensus": f"spread {self.marginal_spread:.3e} vs lambda_opt {self.lambda_opt:.6g}",
            "cost-savings": f"simulated {self.cost_savings_pct} % vs closed-form {self.oracle_savings_pct} %",
            "sliding-reaching": f"T_r = {np.array2string(self.reaching_time, precision=4)} s, "
                                f"u rate bound {'held' if self.u_rate_ok else 'violated'}",
            "lyapunov-monotonic": (f"{self.lyapunov_violations} increments above {self.lyapunov_tolerance:.3e} "
                                   f"(worst {self.lyapunov_worst_increment:.3e})"
                                   if self.lyapunov_checked else "not checked (manifold never reached)"),
            "states-bounded": f"balance error {self.balance_error:.3e} p.u.",
        }
        for name, ok in self.criteria.items():
            lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {fmt.get(name, '')}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def convergence_metrics(traj: Trajectory, dispatch: DispatchResult,
                        thresholds: Thresholds = Thresholds()) -> VerificationReport:
    """Compute the verification report for a completed trajectory.

    The dispatch argument is the closed-form optimum for the final
    demand.  Storage references are rebuilt from it (equilibrium solve at
    the final demand); for the a-zero variant, which converges to a
    non-optimal split, storage is evaluated against the balanced
    projection of the final state so monotonicity remains assertable.
    """
    scen = traj.scenario
    net, cfg = scen.network, scen.controller
    thr = thresholds
    if traj.t.shape[0] < 2:
        raise ValueError("trajectory too short to analyse")

    settle_t, conclusive = settling_time(traj, thr.freq_band, thr.settle_hold)
    reach = reaching_times(traj, thr.sigma_band)
    reach_all = float(reach.max())

    dispatch_err = float(np.abs(traj.P_t[-1] - dispatch.P_t_opt).max())
    spread = marginal_spread(traj.theta[-1], cfg.cost)
    lam_full = float(cfg.cost.marginal(dispatch.P_t_opt).mean())

    final_demand = traj.P_d[-1]
    savings = cost_savings(traj, cfg.cost)
    own = final_demand - scen.baseline
    own_cost = total_cost(own, cfg.cost)
    oracle_savings = None
    if own_cost != 0.0:
        oracle_savings = float(100.0 * (1.0 - total_cost(dispatch.P_t_opt, cfg.cost) / own_cost))
    in_band = (savings is not None
               and thr.savings_band[0] <= savings <= thr.savings_band[1])

    # storage references: optimal split, or the run's own balanced endpoint
    # for the a-zero variant
    if cfg.variant == "ssosm-a-zero":
        P_ref = traj.P_t[-1] - (traj.P_t[-1].sum() - final_demand.sum()) / net.n
    else:
        P_ref = dispatch.P_t_opt
    eq = solve_equilibrium(P_ref, net, P_d=final_demand)
    refs = {"equilibrium": eq, "P_opt": P_ref, "theta_bar": P_ref}
    if cfg.variant == "primal-dual":
        theta_b, v_b, lam_b = primal_dual_reference(cfg, P_ref, final_demand)
        refs.update({"theta_bar": theta_b, "v_bar": v_b, "lam_bar": lam_b})
    attach_storage(traj, net, cfg, refs)

    S = traj.diagnostics["S_total"]
    lyap_checked = bool(np.isfinite(reach_all))
    violations = 0
    worst = 0.0
    tol_abs = 0.0
    if lyap_checked:
        start = int(np.searchsorted(traj.t, reach_all + scen.dt))
        seg = S[start:]
        if seg.shape[0] >= 2:
            inc = np.diff(seg)
            tol_abs = thr.lyapunov_rel * float(seg.max())
            violations = int(np.sum(inc > tol_abs))
            worst = float(inc.max())
        else:
            lyap_checked = False

    du = np.abs(np.diff(traj.u, axis=0))
    stride = scen.record_stride
    u_bound = cfg.W_max * scen.dt * stride * (1.0 + thr.u_rate_slack)
    u_ok = bool(np.all(du <= u_bound[None, :]))

    bounded = bool(np.all(np.abs(traj.f) < thr.freq_bound)
                   and np.all(traj.V > thr.v_bounds[0]) and np.all(traj.V < thr.v_bounds[1]))
    balance_err = float(abs(traj.P_t[-1].sum() - final_demand.sum()))

    criteria = {
        "frequency-settling": settle_t is not None and conclusive,
        "dispatch-optimality": dispatch_err < thr.dispatch_tol,
        "marginal-cost-consensus": spread < thr.consensus_rel * abs(lam_full),
        "cost-savings": (savings is not None and oracle_savings is not None
                         and abs(savings - oracle_savings) <= thr.savings_tol_pp),
        "sliding-reaching": bool(np.all(np.isfinite(reach))) and u_ok,
        "lyapunov-monotonic": lyap_checked and violations == 0,
        "states-bounded": bounded,
    }

    return VerificationReport(
        settling_time=settle_t, settling_conclusive=conclusive,
        reaching_time=reach, reaching_time_overall=reach_all,
        dispatch_error=dispatch_err, marginal_spread=spread, lambda_opt=lam_full,
        lyapunov_checked=bool(lyap_checked), lyapunov_violations=violations,
        lyapunov_worst_increment=worst, lyapunov_tolerance=tol_abs,
        cost_savings_pct=savings, oracle_savings_pct=oracle_savings,
        savings_in_band=bool(in_band), u_rate_ok=u_ok, states_bounded=bounded,
        balance_error=balance_err, criteria=criteria)
