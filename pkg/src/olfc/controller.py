"""Distributed sliding-mode control stack.

The controller augments each area's turbine-governor chain with a
consensus state theta (a low-pass filtered copy of the turbine output
that exchanges marginal costs with communication neighbours), measures
the local sliding output

    sigma_i = M1 f_i + M2 P_t,i + M3 P_g,i + M4 theta_i,   M4 = -(M2 + M3),

and drives sigma and its derivative to zero with the suboptimal
second-order sliding-mode law: the discontinuous signal

    w_i = -alpha_i W_max,i sgn(sigma_i - xi1_max,i / 2)

is integrated once to produce the continuous governor setpoint u_i.
xi1_max,i is the most recent detected extremum of sigma_i and alpha_i
switches between alpha*_i and 1.  A primal-dual variant replaces the
consensus exchange with explicit dual flow/multiplier states and
requires demand measurements.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .dispatch import CostModel
from .errors import ValidationError, ValidationIssue

VARIANTS = ("ssosm-consensus", "ssosm-a-zero", "primal-dual")
_VARIANT_CODE = {"ssosm-consensus": _k.VARIANT_CONSENSUS,
                 "ssosm-a-zero": _k.VARIANT_A_ZERO,
                 "primal-dual": _k.VARIANT_PRIMAL_DUAL}


def laplacian_from_edges(n, edges, weights=None):
    """Laplacian of an undirected graph on n nodes from an edge list."""
    L = np.zeros((n, n))
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=float)
    for k, (i, j) in enumerate(edges):
        L[i, i] += w[k]
        L[j, j] += w[k]
        L[i, j] -= w[k]
        L[j, i] -= w[k]
    return L


def _connected(n, edges):
    adj = {i: set() for i in range(n)}
    for (i, j) in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for u in adj[v] - seen:
            seen.add(u)
            stack.append(u)
    return len(seen) == n


def _as_vec(x, n, name):
    v = np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()
    return v


@dataclass(frozen=True)
class ControllerConfig:
    """Gains and communication structure of the distributed controller.

    ``cost`` is the cost model whose marginal costs are exchanged on the
    communication channel; ``cost_scale`` expresses the units used on
    that channel (coordination uses Q / cost_scale, which leaves the
    dispatch optimum and all relative criteria unchanged but sets the
    stiffness of the consensus dynamics).
    """

    M1: np.ndarray
    M2: np.ndarray
    M3: np.ndarray
    W_max: np.ndarray
    alpha_star: np.ndarray
    T_theta: np.ndarray
    cost: CostModel
    com_edges: tuple
    L_com: np.ndarray | None = None
    variant: str = "ssosm-consensus"
    cost_scale: float = 1.0
    eps_peak: float = 1e-9

    def __post_init__(self):
        n = self.cost.n
        issues = []
        for name in ("M1", "M2", "M3", "W_max", "alpha_star", "T_theta"):
            object.__setattr__(self, name, _as_vec(getattr(self, name), n, name))
        object.__setattr__(self, "com_edges", tuple((int(i), int(j)) for i, j in self.com_edges))
        if np.any(self.M1 <= 0.0):
            issues.append(ValidationIssue("controller.M1-strictly-positive", "controller.M1",
                                          f"M1 must be > 0 componentwise, got {self.M1}"))
        if np.any(self.M2 < 0.0):
            issues.append(ValidationIssue("controller.M2-nonnegative", "controller.M2",
                                          f"M2 must be >= 0 componentwise, got {self.M2}"))
        if np.any(self.M3 <= 0.0):
            issues.append(ValidationIssue("controller.M3-strictly-positive", "controller.M3",
                                          f"M3 must be > 0 componentwise, got {self.M3}"))
        if np.any(self.W_max <= 0.0):
            issues.append(ValidationIssue("controller.Wmax-positive", "controller.W_max",
                                          f"W_max must be > 0, got {self.W_max}"))
        if np.any((self.alpha_star <= 0.0) | (self.alpha_star > 1.0)):
            issues.append(ValidationIssue("controller.alpha-star-range", "controller.alpha_star",
                                          f"alpha_star must lie in (0, 1], got {self.alpha_star}"))
        if np.any(self.T_theta <= 0.0):
            issues.append(ValidationIssue("controller.T-theta-positive", "controller.T_theta",
                                          f"T_theta must be > 0, got {self.T_theta}"))
        if self.variant not in VARIANTS:
            issues.append(ValidationIssue("controller.variant", "controller.variant",
                                          f"variant must be one of {VARIANTS}, got {self.variant!r}"))
        if self.cost_scale <= 0.0:
            issues.append(ValidationIssue("controller.cost-scale-positive", "controller.cost.scale",
                                          "cost_scale must be > 0"))
        for k, (i, j) in enumerate(self.com_edges):
            if i == j or not (0 <= i < n) or not (0 <= j < n):
                issues.append(ValidationIssue("controller.communication-edges", f"controller.communication.edges[{k}]",
                                              f"invalid edge ({i}, {j}) for {n} areas"))
        if not issues and not _connected(n, self.com_edges):
            issues.append(ValidationIssue("controller.communication-connected", "controller.communication.edges",
                                          "communication graph must be undirected and connected"))
        L = laplacian_from_edges(n, self.com_edges) if self.L_com is None else np.asarray(self.L_com, dtype=float)
        object.__setattr__(self, "L_com", L)
        if L.shape != (n, n) or not np.allclose(L, L.T, atol=1e-12):
            issues.append(ValidationIssue("controller.laplacian-symmetric", "controller.L_com",
                                          "communication Laplacian must be symmetric n x n"))
        elif np.abs(L.sum(axis=1)).max() > 1e-9:
            issues.append(ValidationIssue("controller.laplacian-row-sums", "controller.L_com",
                                          "communication Laplacian rows must sum to zero"))
        elif np.linalg.eigvalsh(L).min() < -1e-9:
            issues.append(ValidationIssue("controller.laplacian-psd", "controller.L_com",
                                          "communication Laplacian must be positive semidefinite"))
        if issues:
            raise ValidationError(issues)

    @property
    def n(self):
        return self.cost.n

    @property
    def M4(self):
        return -(self.M2 + self.M3)

    @property
    def variant_code(self):
        return _VARIANT_CODE[self.variant]

    def coordination_Q(self):
        """Quadratic coefficients in the units used on the communication channel."""
        return self.cost.Q / self.cost_scale

    def coordination_Rlin(self):
        return self.cost.Rlin / self.cost_scale

    def com_incidence(self):
        """Incidence matrix of the communication graph (first listed node
        is the positive end of each edge)."""
        mc = len(self.com_edges)
        B = np.zeros((self.n, mc))
        for k, (i, j) in enumerate(self.com_edges):
            B[i, k] = 1.0
            B[j, k] = -1.0
        return B


def sliding_function(f, P_t, P_g, theta, config: ControllerConfig) -> np.ndarray:
    """Local sliding outputs sigma = M1 f + M2 P_t + M3 P_g + M4 theta."""
    sigma = np.empty(config.n)
    _k.sigma_kernel(np.ascontiguousarray(f, dtype=float), np.ascontiguousarray(P_t, dtype=float),
                    np.ascontiguousarray(P_g, dtype=float), np.ascontiguousarray(theta, dtype=float),
                    config.M1, config.M2, config.M3, config.M4, sigma)
    return sigma


def build_A(config: ControllerConfig) -> np.ndarray:
    """Consensus gain matrix A = (M2 + M3)^-1 M1 Q as a diagonal matrix,
    with Q in coordination units."""
    return np.diag(config.M1 * config.coordination_Q() / (config.M2 + config.M3))


def _a_diag(config: ControllerConfig) -> np.ndarray:
    if config.variant == "ssosm-a-zero":
        return np.zeros(config.n)
    return config.M1 * config.coordination_Q() / (config.M2 + config.M3)


def consensus_rhs(theta, P_t, config: ControllerConfig) -> np.ndarray:
    """theta' from T_theta theta' = -theta + P_t - A L_com (Q theta + Rlin).

    The a-zero variant drops the marginal-cost exchange (A = 0), leaving
    a pure low-pass filter of P_t.
    """
    dtheta = np.empty(config.n)
    _k.consensus_rhs_kernel(np.ascontiguousarray(theta, dtype=float), np.ascontiguousarray(P_t, dtype=float),
                            config.T_theta, _a_diag(config), config.L_com,
                            config.coordination_Q(), config.coordination_Rlin(), dtheta)
    return dtheta


def primal_dual_rhs(theta, v, lam, P_t, P_d, config: ControllerConfig):
    """Primal-dual augmentation (requires demand measurements):

        T_theta theta' = -theta + P_t - M1 (M2+M3)^-1 (grad C(theta) - lam)
        v'   = -B_com' lam
        lam' = B_com v - theta + P_d
    """
    n = config.n
    mc = len(config.com_edges)
    dtheta = np.empty(n)
    dv = np.empty(mc)
    dlam = np.empty(n)
    ci = np.array([i for (i, _) in config.com_edges], dtype=np.int64)
    cj = np.array([j for (_, j) in config.com_edges], dtype=np.int64)
    gain = config.M1 / (config.M2 + config.M3)
    _k.primal_dual_rhs_kernel(np.ascontiguousarray(theta, dtype=float), np.ascontiguousarray(v, dtype=float),
                              np.ascontiguousarray(lam, dtype=float), np.ascontiguousarray(P_t, dtype=float),
                              np.ascontiguousarray(P_d, dtype=float), config.T_theta, gain,
                              config.coordination_Q(), config.coordination_Rlin(), ci, cj,
                              dtheta, dv, dlam)
    return dtheta, dv, dlam


@dataclass
class SsosmMemory:
    """Per-area controller memory: last detected extremum of sigma, the two
    previous sigma samples, the current switching gain, and the integrated
    control.  u moves by at most W_max * dt per step."""

    xi1_max: np.ndarray
    sigma_prev: np.ndarray
    sigma_prev2: np.ndarray
    alpha: np.ndarray
    u: np.ndarray
    w: np.ndarray

    @classmethod
    def initialize(cls, sigma0, u0=None):
        sigma0 = np.asarray(sigma0, dtype=float)
        n = sigma0.shape[0]
        u = np.zeros(n) if u0 is None else np.asarray(u0, dtype=float).copy()
        return cls(xi1_max=sigma0.copy(), sigma_prev=sigma0.copy(), sigma_prev2=sigma0.copy(),
                   alpha=np.ones(n), u=u, w=np.zeros(n))

    def copy(self):
        return SsosmMemory(self.xi1_max.copy(), self.sigma_prev.copy(), self.sigma_prev2.copy(),
                           self.alpha.copy(), self.u.copy(), self.w.copy())


def ssosm_step(sigma_sample, memory: SsosmMemory, dt, config: ControllerConfig):
    """One controller update from a fresh sigma sample.

    Peak detection: the previous sample is a new extremum when the sign
    of the sampled slope flips and it differs from the stored extremum by
    more than eps_peak.  Then alpha_i = alpha*_i when
    (sigma - xi1_max/2)(xi1_max - sigma) > 0, else 1, and
    w_i = -alpha_i W_max,i sgn(sigma_i - xi1_max,i/2); u integrates w.
    Mutates ``memory`` in place and returns (w, memory).
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    sigma_sample = np.ascontiguousarray(sigma_sample, dtype=float)
    _k.ssosm_kernel(sigma_sample, memory.xi1_max, memory.sigma_prev, memory.sigma_prev2,
                    config.alpha_star, config.W_max, config.eps_peak, dt,
                    memory.alpha, memory.w, memory.u)
    return memory.w.copy(), memory


def sliding_derivative(state, P_d, config: ControllerConfig, network) -> np.ndarray:
    """Analytic sigma' assembled from the closed-loop right-hand sides.

    Diagnostic use only: the running controller never measures sigma'.
    """
    from .network import network_rhs, turbine_governor_rhs, PhysicalState

    phys = PhysicalState(eta=state.eta, f=state.f, V=state.V, P_t=state.P_t, P_g=state.P_g)
    _, df, _ = network_rhs(phys, P_d, network)
    dPt, dPg = turbine_governor_rhs(state.P_t, state.P_g, state.f, state.u, network)
    if config.variant == "primal-dual":
        dtheta, _, _ = primal_dual_rhs(state.theta, state.v, state.lam, state.P_t, P_d, config)
    else:
        dtheta = consensus_rhs(state.theta, state.P_t, config)
    return config.M1 * df + config.M2 * dPt + config.M3 * dPg + config.M4 * dtheta


def equivalent_rhs(P_t, theta, f, config: ControllerConfig, network):
    """Reduced dynamics on the sliding manifold (sigma = sigma' = 0):

        M3 T_t P_t' = -(M2 + M3) P_t - M4 theta - M1 f
        T_theta theta' = -theta + P_t - A L_com (Q theta + Rlin)
    """
    if config.variant == "primal-dual":
        raise ValueError("equivalent_rhs covers the consensus variants; "
                         "use primal_dual_rhs for the theta dynamics of the primal-dual variant")
    P_t = np.asarray(P_t, dtype=float)
    theta = np.asarray(theta, dtype=float)
    f = np.asarray(f, dtype=float)
    dPt = (-(config.M2 + config.M3) * P_t - config.M4 * theta - config.M1 * f) / (config.M3 * network.T_t)
    return dPt, consensus_rhs(theta, P_t, config)


@dataclass
class OperatingEnvelope:
    """Declared operating ranges used to bound the drift of the sliding
    output's second derivative by sampling.

    Two parametrizations:

    - regime "raw": independent boxes for every state (f, V, eta, P_t,
      P_g, theta, u) and the demand.
    - regime "sliding": boxes in the coordinates of the sliding regime,
      where the states are strongly correlated: a common marginal-cost
      level (``marginal``, coordination units) with a per-area
      disagreement (``marginal_spread``) determines theta; P_t = theta +
      ``tracking``; P_g follows the manifold relation up to a residual
      ``sigma`` band; u = P_g + f/R + ``setpoint_offset``.  This is the
      regime in which the amplitude constraint has to hold to maintain
      the sliding mode.
    """

    f: tuple
    V: tuple
    eta: tuple
    P_d: tuple
    P_t: tuple = None
    P_g: tuple = None
    theta: tuple = None
    u: tuple = None
    marginal: tuple = None
    marginal_spread: tuple = None
    tracking: tuple = None
    sigma: tuple = None
    setpoint_offset: tuple = None
    v: tuple = None
    lam: tuple = None
    regime: str = "raw"

    _RAW = ("P_t", "P_g", "theta", "u")
    _SLIDING = ("marginal", "marginal_spread", "tracking", "sigma", "setpoint_offset")

    @classmethod
    def from_ranges(cls, n, m, mc=0, regime="raw", **ranges):
        """Build from per-variable (lo, hi) pairs; scalars broadcast."""
        if regime not in ("raw", "sliding"):
            raise ValueError(f"envelope regime must be 'raw' or 'sliding', got {regime!r}")
        sizes = {"f": n, "V": n, "eta": m, "P_d": n,
                 "P_t": n, "P_g": n, "theta": n, "u": n,
                 "marginal": 1, "marginal_spread": n, "tracking": n,
                 "sigma": n, "setpoint_offset": n,
                 "v": max(mc, 1), "lam": n}
        needed = ("f", "V", "eta", "P_d") + (cls._SLIDING if regime == "sliding" else cls._RAW)
        out = {"regime": regime}
        for name, size in sizes.items():
            if name not in ranges and name not in needed:
                out[name] = None
                continue
            lo, hi = ranges.get(name, (0.0, 0.0))
            lo = np.broadcast_to(np.asarray(lo, dtype=float), (size,)).copy()
            hi = np.broadcast_to(np.asarray(hi, dtype=float), (size,)).copy()
            if np.any(lo > hi):
                raise ValueError(f"envelope for {name} has lo > hi")
            out[name] = (lo, hi)
        return cls(**out)

    def is_empty(self):
        core = ("f", "V", "eta", "P_d") + (self._SLIDING if self.regime == "sliding" else self._RAW)
        return all(self.__dict__[k] is None or np.all(self.__dict__[k][0] == self.__dict__[k][1])
                   for k in core)


@dataclass
class GainBoundsReport:
    """Exact input gains, sampled drift bounds, and the resulting checks
    on the configured control amplitudes and switching parameters."""

    Phi: np.ndarray
    G: np.ndarray
    G_min: np.ndarray
    G_max: np.ndarray
    required_W_max: np.ndarray
    wmax_ok: bool
    wmax_ok_per_area: np.ndarray
    alpha_ok: bool
    n_samples: int
    safety: float


def gain_bounds(network, config: ControllerConfig, envelope: OperatingEnvelope,
                n_samples=20000, seed=0, safety=2.0) -> GainBoundsReport:
    """Validate the sliding-mode amplitude constraints over an envelope.

    The input gain of the auxiliary (sigma, sigma') system is known
    exactly, G = M3 / T_g, so the per-area lower and upper gain bounds
    coincide.  The drift bound Phi is a Monte Carlo maximum of the
    analytic drift over the declared box, inflated by ``safety``.  The
    amplitude check is W_max > max(Phi/(alpha* G_min),
    4 Phi / (3 G_min - alpha* G_max)) and the switching parameter must
    satisfy alpha* in (0, 1] and (0, 3 G_min/G_max).
    """
    if envelope is None or envelope.is_empty():
        raise ValueError("gain_bounds requires a non-empty operating envelope")
    if envelope.regime == "sliding" and config.variant == "primal-dual":
        raise ValueError("the sliding-regime envelope parametrization covers the consensus variants; "
                         "declare a raw envelope for the primal-dual controller")
    n, m = network.n, network.m
    rng = np.random.default_rng(seed)
    Qc = config.coordination_Q()
    Rc = config.coordination_Rlin()
    Adiag = _a_diag(config)
    gain_pd = config.M1 / (config.M2 + config.M3)
    li, lj, lb = network.line_from, network.line_to, network.line_b
    Bcom = config.com_incidence() if config.variant == "primal-dual" else None

    def draw(pair):
        lo, hi = pair
        return lo + (hi - lo) * rng.random(lo.shape[0])

    phi_max = np.zeros(n)
    from .network import PhysicalState, network_rhs, turbine_governor_rhs

    for _ in range(n_samples):
        eta = draw(envelope.eta)
        f = draw(envelope.f)
        V = draw(envelope.V)
        Pd = draw(envelope.P_d)
        if envelope.regime == "sliding":
            c = draw(envelope.marginal)[0]
            d = draw(envelope.marginal_spread)
            th = (c + d - Rc) / Qc
            Pt = th + draw(envelope.tracking)
            sig = draw(envelope.sigma)
            Pg = (sig - config.M1 * f - config.M2 * Pt - config.M4 * th) / config.M3
            u = Pg + f / network.R + draw(envelope.setpoint_offset)
        else:
            Pt = draw(envelope.P_t)
            Pg = draw(envelope.P_g)
            th = draw(envelope.theta)
            u = draw(envelope.u)
        _, df, dV = network_rhs(PhysicalState(eta, f, V, Pt, Pg), Pd, network)
        deta = network.incidence.T @ f
        dPt, dPg = turbine_governor_rhs(Pt, Pg, f, u, network)
        gamma = lb * V[li] * V[lj]
        dgamma = lb * (dV[li] * V[lj] + V[li] * dV[lj])
        dflow = network.incidence @ (dgamma * np.sin(eta) + gamma * np.cos(eta) * deta)
        ddf = (-df + network.K_p * (dPt + dflow)) / network.T_p
        ddPt = (-dPt + dPg) / network.T_t
        ddPg_drift = (-df / network.R - dPg) / network.T_g
        if config.variant == "primal-dual":
            mc = max(len(config.com_edges), 1)
            vv = draw(envelope.v) if envelope.v is not None else np.zeros(mc)
            lam = draw(envelope.lam) if envelope.lam is not None else np.zeros(n)
            dlam = Bcom @ vv[:len(config.com_edges)] - th + Pd
            dth = (-th + Pt - gain_pd * (Qc * th + Rc - lam)) / config.T_theta
            ddth = (-dth + dPt - gain_pd * (Qc * dth - dlam)) / config.T_theta
        else:
            dth = consensus_rhs(th, Pt, config)
            ddth = (-dth + dPt - Adiag * (config.L_com @ (Qc * dth))) / config.T_theta
        phi = np.abs(config.M1 * ddf + config.M2 * ddPt + config.M3 * ddPg_drift + config.M4 * ddth)
        np.maximum(phi_max, phi, out=phi_max)

    G = config.M3 / network.T_g
    Phi = safety * phi_max
    required = np.maximum(Phi / (config.alpha_star * G), 4.0 * Phi / (3.0 * G - config.alpha_star * G))
    ok = config.W_max > required
    alpha_ok = bool(np.all((config.alpha_star > 0.0)
                           & (config.alpha_star <= 1.0)
                           & (config.alpha_star < 3.0 * G / G)))
    return GainBoundsReport(Phi=Phi, G=G, G_min=G.copy(), G_max=G.copy(),
                            required_W_max=required, wmax_ok=bool(np.all(ok)),
                            wmax_ok_per_area=ok, alpha_ok=alpha_ok,
                            n_samples=n_samples, safety=safety)
