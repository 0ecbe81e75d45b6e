"""Fixed-step closed-loop integration under timed load-step scenarios.

One step = an explicit RK4 update of the smooth states (eta, f, V, P_t,
P_g, theta and, for the primal-dual variant, v and lambda) with the
discontinuous input w and the demand held constant across the step,
followed by one controller update from the fresh sigma sample.  Demand
events are applied instantaneously at their time stamps.  Runs are
deterministic: identical scenarios produce bit-identical trajectories.
"""

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .controller import ControllerConfig, OperatingEnvelope, SsosmMemory, _a_diag, sliding_function
from .dispatch import optimal_dispatch
from .errors import NumericAbortError, ValidationError, ValidationIssue
from .network import Network, solve_equilibrium


@dataclass
class SystemState:
    """Full closed-loop state; v and lam are present only for the
    primal-dual controller variant."""

    eta: np.ndarray
    f: np.ndarray
    V: np.ndarray
    P_t: np.ndarray
    P_g: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    v: np.ndarray | None = None
    lam: np.ndarray | None = None

    def copy(self):
        return SystemState(self.eta.copy(), self.f.copy(), self.V.copy(), self.P_t.copy(),
                           self.P_g.copy(), self.theta.copy(), self.u.copy(),
                           None if self.v is None else self.v.copy(),
                           None if self.lam is None else self.lam.copy())


@dataclass(frozen=True)
class LoadEvent:
    """Instantaneous additive change of the demand vector at a time stamp."""

    time: float
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float))


@dataclass
class Scenario:
    """Everything that determines one run: network, controller, demand
    schedule, integration settings, and the initial-condition policy
    ("equilibrium" or an explicit :class:`SystemState`)."""

    network: Network
    controller: ControllerConfig
    baseline: np.ndarray
    events: tuple
    t_end: float = 60.0
    dt: float = 1e-4
    record_stride: int = 10
    initial: object = "equilibrium"
    envelope: OperatingEnvelope | None = None
    name: str = "scenario"

    def __post_init__(self):
        issues = []
        self.baseline = np.broadcast_to(np.asarray(self.baseline, dtype=float), (self.network.n,)).copy()
        self.events = tuple(self.events)
        if self.dt <= 0.0:
            issues.append(ValidationIssue("simulation.dt-positive", "simulation.dt", f"dt must be > 0, got {self.dt}"))
        if self.t_end <= 0.0:
            issues.append(ValidationIssue("simulation.t-end-positive", "simulation.t_end", "t_end must be > 0"))
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            issues.append(ValidationIssue("simulation.record-stride", "simulation.record_stride",
                                          "record_stride must be a positive integer"))
        prev = -np.inf
        for idx, ev in enumerate(self.events):
            if not (0.0 <= ev.time <= self.t_end):
                issues.append(ValidationIssue("events.time-range", f"demand.events[{idx}].time",
                                              f"event time {ev.time} outside [0, {self.t_end}]"))
            if ev.time <= prev:
                issues.append(ValidationIssue("events.times-increasing", f"demand.events[{idx}].time",
                                              "event times must be strictly increasing"))
            prev = ev.time
            if ev.delta.shape != (self.network.n,):
                issues.append(ValidationIssue("events.delta-shape", f"demand.events[{idx}].delta",
                                              f"expected {self.network.n} entries, got {ev.delta.shape}"))
        if self.controller.n != self.network.n:
            issues.append(ValidationIssue("controller.area-count", "controller",
                                          f"controller sized for {self.controller.n} areas, network has {self.network.n}"))
        if issues:
            raise ValidationError(issues)

    @property
    def n_steps(self):
        steps = round(self.t_end / self.dt)
        if abs(steps * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            warnings.warn(f"t_end {self.t_end} is not a multiple of dt {self.dt}; running {steps} steps",
                          stacklevel=2)
        return steps

    def event_steps(self):
        """Events mapped to integration-step indices (snapped to the grid)."""
        steps = []
        for ev in self.events:
            k = round(ev.time / self.dt)
            if abs(k * self.dt - ev.time) > 1e-9 * max(1.0, ev.time):
                warnings.warn(f"event time {ev.time} snapped to step grid at {k * self.dt}", stacklevel=2)
            steps.append(k)
        return np.asarray(steps, dtype=np.int64)

    def final_demand(self):
        d = self.baseline.copy()
        for ev in self.events:
            d += ev.delta
        return d


@dataclass
class Trajectory:
    """Recorded closed-loop run on a uniform grid of spacing dt * stride."""

    t: np.ndarray
    eta: np.ndarray
    f: np.ndarray
    V: np.ndarray
    P_t: np.ndarray
    P_g: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    w: np.ndarray
    sigma: np.ndarray
    sigma_dot: np.ndarray
    P_d: np.ndarray
    v: np.ndarray | None
    lam: np.ndarray | None
    scenario: Scenario
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_areas(self):
        return self.f.shape[1]

    def state_at(self, idx) -> SystemState:
        return SystemState(self.eta[idx].copy(), self.f[idx].copy(), self.V[idx].copy(),
                           self.P_t[idx].copy(), self.P_g[idx].copy(), self.theta[idx].copy(),
                           self.u[idx].copy(),
                           None if self.v is None else self.v[idx].copy(),
                           None if self.lam is None else self.lam[idx].copy())

    def final_state(self) -> SystemState:
        return self.state_at(-1)


def _pack_params(network: Network, config: ControllerConfig):
    mc = len(config.com_edges) if config.variant == "primal-dual" else 0
    if mc:
        ci = np.array([i for (i, _) in config.com_edges], dtype=np.int64)
        cj = np.array([j for (_, j) in config.com_edges], dtype=np.int64)
    else:
        ci = np.empty(0, dtype=np.int64)
        cj = np.empty(0, dtype=np.int64)
    return (network.n, network.m, mc,
            network.T_p, network.K_p, network.T_V, network.XmX, network.E_f, network.E_diag,
            network.line_from, network.line_to, network.line_b,
            network.T_t, network.T_g, network.R,
            config.T_theta, _a_diag(config), config.L_com,
            config.coordination_Q(), config.coordination_Rlin(),
            config.M1 / (config.M2 + config.M3), ci, cj)


def _pack_state(state: SystemState, network: Network, mc: int, primal_dual: bool):
    parts = [state.eta, state.f, state.V, state.P_t, state.P_g, state.theta]
    if primal_dual:
        parts.append(np.zeros(mc) if state.v is None else state.v)
        parts.append(np.zeros(network.n) if state.lam is None else state.lam)
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def _unpack_state(y, u, network: Network, mc: int, primal_dual: bool) -> SystemState:
    n, m = network.n, network.m
    v = lam = None
    if primal_dual:
        v = y[m + 5 * n:m + 5 * n + mc].copy()
        lam = y[m + 5 * n + mc:m + 6 * n + mc].copy()
    return SystemState(eta=y[0:m].copy(), f=y[m:m + n].copy(), V=y[m + n:m + 2 * n].copy(),
                       P_t=y[m + 2 * n:m + 3 * n].copy(), P_g=y[m + 3 * n:m + 4 * n].copy(),
                       theta=y[m + 4 * n:m + 5 * n].copy(), u=u.copy(), v=v, lam=lam)


def initial_state(scenario: Scenario):
    """Initial (state, controller memory) for a scenario.

    The "equilibrium" policy places the system at the zero-frequency
    steady state of the baseline demand with the baseline dispatched
    cost-optimally, which also puts the controller states exactly on the
    sliding manifold (sigma = 0, u = P_g).
    """
    net, cfg = scenario.network, scenario.controller
    if isinstance(scenario.initial, SystemState):
        state = scenario.initial.copy()
    else:
        disp = optimal_dispatch(scenario.baseline, cfg.cost)
        eq = solve_equilibrium(disp.P_t_opt, net, P_d=scenario.baseline)
        state = SystemState(eta=eq.eta, f=np.zeros(net.n), V=eq.V,
                            P_t=disp.P_t_opt.copy(), P_g=disp.P_t_opt.copy(),
                            theta=disp.P_t_opt.copy(), u=disp.P_t_opt.copy())
        if cfg.variant == "primal-dual":
            state.lam = cfg.cost.marginal(state.theta) / cfg.cost_scale
            Bcom = cfg.com_incidence()
            rhs = state.theta - scenario.baseline
            state.v = np.linalg.lstsq(Bcom, rhs, rcond=None)[0]
    sigma0 = sliding_function(state.f, state.P_t, state.P_g, state.theta, cfg)
    memory = SsosmMemory.initialize(sigma0, u0=state.u)
    return state, memory


def step(state: SystemState, memory: SsosmMemory, P_d, dt, network: Network,
         config: ControllerConfig):
    """Advance the closed loop by one step of size dt.

    RK4 on the smooth dynamics with u and P_d held constant, then one
    SSOSM update (new w, u += w dt) from the sigma sample at the new
    state.  Returns (next state, memory); the memory record is mutated.
    """
    params = _pack_params(network, config)
    mc = params[2]
    primal_dual = config.variant == "primal-dual"
    y = _pack_state(state, network, mc, primal_dual)
    Pd = np.broadcast_to(np.asarray(P_d, dtype=float), (network.n,)).copy()
    N = y.shape[0]
    k1, k2, k3, k4, ytmp = (np.empty(N) for _ in range(5))
    _k.rk4_step(y, memory.u, Pd, config.variant_code, params, dt, k1, k2, k3, k4, ytmp)
    if not np.all(np.isfinite(y)):
        raise NumericAbortError()
    n, m = network.n, network.m
    sigma = sliding_function(y[m:m + n], y[m + 2 * n:m + 3 * n], y[m + 3 * n:m + 4 * n],
                             y[m + 4 * n:m + 5 * n], config)
    _k.ssosm_kernel(sigma, memory.xi1_max, memory.sigma_prev, memory.sigma_prev2,
                    config.alpha_star, config.W_max, config.eps_peak, dt,
                    memory.alpha, memory.w, memory.u)
    return _unpack_state(y, memory.u, network, mc, primal_dual), memory


def run_scenario(scenario: Scenario) -> Trajectory:
    """Integrate a full scenario and return the recorded trajectory."""
    net, cfg = scenario.network, scenario.controller
    n, m = net.n, net.m
    params = _pack_params(net, cfg)
    mc = params[2]
    primal_dual = cfg.variant == "primal-dual"
    state, memory = initial_state(scenario)
    y = _pack_state(state, net, mc, primal_dual)

    n_steps = scenario.n_steps
    stride = int(scenario.record_stride)
    K = n_steps // stride + 1
    ev_step = scenario.event_steps()
    ev_delta = (np.stack([ev.delta for ev in scenario.events])
                if scenario.events else np.zeros((0, n)))

    out_t = np.empty(K)
    out_y = np.empty((K, y.shape[0]))
    out_u = np.empty((K, n))
    out_w = np.empty((K, n))
    out_sigma = np.empty((K, n))
    out_sigdot = np.empty((K, n))
    out_Pd = np.empty((K, n))

    Pd = scenario.baseline.copy()
    status = _k.run_loop(y, memory.u, Pd, memory.xi1_max, memory.sigma_prev, memory.sigma_prev2,
                         memory.alpha, memory.w, cfg.variant_code, params,
                         cfg.M1, cfg.M2, cfg.M3, cfg.M4, cfg.alpha_star, cfg.W_max, cfg.eps_peak,
                         ev_step, ev_delta, scenario.dt, n_steps, stride,
                         out_t, out_y, out_u, out_w, out_sigma, out_sigdot, out_Pd)

    good = K if status < 0 else status

    def cut(a):
        return a[:good]

    traj = Trajectory(
        t=cut(out_t), eta=cut(out_y[:, 0:m]), f=cut(out_y[:, m:m + n]),
        V=cut(out_y[:, m + n:m + 2 * n]), P_t=cut(out_y[:, m + 2 * n:m + 3 * n]),
        P_g=cut(out_y[:, m + 3 * n:m + 4 * n]), theta=cut(out_y[:, m + 4 * n:m + 5 * n]),
        u=cut(out_u), w=cut(out_w), sigma=cut(out_sigma), sigma_dot=cut(out_sigdot),
        P_d=cut(out_Pd),
        v=cut(out_y[:, m + 5 * n:m + 5 * n + mc]) if primal_dual else None,
        lam=cut(out_y[:, m + 5 * n + mc:m + 6 * n + mc]) if primal_dual else None,
        scenario=scenario)
    if status >= 0:
        raise NumericAbortError(last_valid_time=float(out_t[good - 1]) if good else 0.0,
                                trajectory=traj)
    return traj


def _run_one(scenario):
    return run_scenario(scenario)


def run_batch(scenarios, workers=None):
    """Run independent scenarios in parallel processes.

    No state is shared between runs; results are returned in input order.
    """
    scenarios = list(scenarios)
    if workers is not None and workers <= 1:
        return [run_scenario(s) for s in scenarios]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, scenarios))
