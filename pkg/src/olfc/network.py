"""Physical data model and open-loop dynamics of the multi-area network.

Each control area is an equivalent generator with flux-decay (single-axis)
voltage dynamics plus a two-stage turbine-governor chain.  Areas are
coupled through lossless tie lines described by an undirected graph with
negative line susceptances.  Per-area dynamics, with N_i the neighbours
of area i and eta_k = delta_i - delta_j the angle difference across
line k ~ {i, j}:

    eta_k'   = f_i - f_j
    T_p f_i' = -f_i + K_p (P_t,i - P_d,i + sum_j V_i V_j B_ij sin(delta_i - delta_j))
    T_V V_i' = E_f,i - (1 - (X_d,i - X'_d,i) B_ii) V_i
               - (X_d,i - X'_d,i) sum_j V_j B_ij cos(delta_i - delta_j)
    T_t P_t' = -P_t + P_g
    T_g P_g' = -f / R - P_g + u

All powers are in per unit (1000 MW base), frequency deviations in Hz,
angles in rad, time in s.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import EquilibriumError, ValidationError, ValidationIssue

_BII_STRICT_TOL = 1e-9
_BII_WARN_TOL = 1e-6


@dataclass(frozen=True)
class AreaParams:
    """Physical constants of one control area.

    T_p, T_t, T_g, T_V are time constants (s); K_p the area gain
    (Hz/p.u.); R the speed regulation coefficient (Hz/p.u.); X_d and
    X_d_prime the direct synchronous (transient) reactances (p.u.);
    E_f the constant exciter voltage (p.u.); B_ii the self-susceptance
    (p.u., optional, normally derived from the incident lines); D a
    bound on the magnitude of the unknown demand (p.u.).
    """

    T_p: float
    T_t: float
    T_g: float
    T_V: float
    K_p: float
    R: float
    X_d: float
    X_d_prime: float
    E_f: float = 1.0
    B_ii: float | None = None
    D: float = 0.1

    def validate(self, path="area"):
        issues = []
        for name in ("T_p", "T_t", "T_g", "T_V"):
            if getattr(self, name) <= 0.0:
                issues.append(ValidationIssue("areas.time-constants-positive", f"{path}.{name}",
                                              f"{name} must be > 0, got {getattr(self, name)}"))
        if self.K_p <= 0.0:
            issues.append(ValidationIssue("areas.Kp-positive", f"{path}.K_p", "K_p must be > 0"))
        if self.R <= 0.0:
            issues.append(ValidationIssue("areas.R-positive", f"{path}.R", "R must be > 0"))
        if not self.X_d > self.X_d_prime:
            issues.append(ValidationIssue("areas.reactance-ordering", f"{path}.X_d",
                                          f"X_d must exceed X_d_prime, got {self.X_d} <= {self.X_d_prime}"))
        if self.B_ii is not None and self.B_ii > 0.0:
            issues.append(ValidationIssue("areas.Bii-nonpositive", f"{path}.B_ii", "B_ii must be <= 0"))
        if self.D < 0.0:
            issues.append(ValidationIssue("areas.demand-bound-nonnegative", f"{path}.D", "D must be >= 0"))
        return issues


@dataclass(frozen=True)
class NetworkTopology:
    """Undirected line graph over the areas.

    Each line is a triple (i, j, B_ij) with 0-based area indices; i is
    taken as the positive end for the incidence orientation.  Line
    susceptances are strictly negative.
    """

    n: int
    lines: tuple

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple((int(i), int(j), float(b)) for i, j, b in self.lines))

    @property
    def m(self):
        return len(self.lines)

    def validate(self, path="network.lines"):
        issues = []
        seen = set()
        for k, (i, j, b) in enumerate(self.lines):
            p = f"{path}[{k}]"
            if i == j or not (0 <= i < self.n) or not (0 <= j < self.n):
                issues.append(ValidationIssue("lines.valid-endpoints", p,
                                              f"line endpoints ({i}, {j}) invalid for {self.n} areas"))
                continue
            if b >= 0.0:
                issues.append(ValidationIssue("lines.susceptance-negative", p,
                                              f"line susceptance must be < 0, got {b}"))
            key = (min(i, j), max(i, j))
            if key in seen:
                issues.append(ValidationIssue("lines.no-duplicates", p, f"duplicate line between {i} and {j}"))
            seen.add(key)
        comps = self.components()
        if len(comps) != 1:
            issues.append(ValidationIssue("topology.connected", path,
                                          "network graph is disconnected; components: "
                                          + ", ".join(str(sorted(c)) for c in comps)))
        return issues

    def components(self):
        """Connected components as a list of sets of area indices."""
        adj = {i: set() for i in range(self.n)}
        for (i, j, _) in self.lines:
            if 0 <= i < self.n and 0 <= j < self.n and i != j:
                adj[i].add(j)
                adj[j].add(i)
        unseen = set(range(self.n))
        comps = []
        while unseen:
            stack = [unseen.pop()]
            comp = set(stack)
            while stack:
                v = stack.pop()
                for w in adj[v] - comp:
                    comp.add(w)
                    stack.append(w)
            unseen -= comp
            comps.append(comp)
        return comps


def build_incidence(topology: NetworkTopology) -> np.ndarray:
    """Incidence matrix (n x m): +1 at the positive end of each line,
    -1 at the negative end.  Rejects disconnected graphs."""
    comps = topology.components()
    if len(comps) != 1:
        raise ValidationError(ValidationIssue(
            "topology.connected", "network.lines",
            "network graph is disconnected; components: " + ", ".join(str(sorted(c)) for c in comps)))
    B = np.zeros((topology.n, topology.m))
    for k, (i, j, _) in enumerate(topology.lines):
        B[i, k] = 1.0
        B[j, k] = -1.0
    return B


class Network:
    """Validated network: per-area parameter arrays plus line topology.

    ``self_susceptance`` selects how B_ii is obtained: "derive" (default)
    computes B_ii as the sum of incident line susceptances and warns if a
    user-supplied value disagrees by more than 1e-6; "strict" requires
    supplied values to match the line sums to 1e-9.
    """

    def __init__(self, areas, topology: NetworkTopology, self_susceptance="derive"):
        areas = tuple(areas)
        issues = []
        if len(areas) != topology.n:
            issues.append(ValidationIssue("network.area-count", "network.areas",
                                          f"{len(areas)} areas but topology has n={topology.n}"))
        for idx, a in enumerate(areas):
            issues.extend(a.validate(path=f"network.areas[{idx}]"))
        issues.extend(topology.validate())
        if self_susceptance not in ("derive", "strict"):
            issues.append(ValidationIssue("network.self-susceptance-mode", "network.self_susceptance",
                                          f"unknown mode {self_susceptance!r}"))
        if issues:
            raise ValidationError(issues)

        self.areas = areas
        self.topology = topology
        self.self_susceptance = self_susceptance
        self.n = topology.n
        self.m = topology.m
        self.incidence = build_incidence(topology)
        self.line_from = np.array([i for (i, _, _) in topology.lines], dtype=np.int64)
        self.line_to = np.array([j for (_, j, _) in topology.lines], dtype=np.int64)
        self.line_b = np.array([b for (_, _, b) in topology.lines])

        derived = np.zeros(self.n)
        for (i, j, b) in topology.lines:
            derived[i] += b
            derived[j] += b
        supplied = np.array([np.nan if a.B_ii is None else a.B_ii for a in areas])
        mismatch = np.abs(np.where(np.isnan(supplied), derived, supplied) - derived)
        if self_susceptance == "strict":
            bad = np.flatnonzero(mismatch > _BII_STRICT_TOL)
            if bad.size:
                raise ValidationError([ValidationIssue(
                    "areas.Bii-consistency", f"network.areas[{i}].B_ii",
                    f"B_ii={supplied[i]} differs from incident-line sum {derived[i]:.9g}") for i in bad])
        else:
            bad = np.flatnonzero(mismatch > _BII_WARN_TOL)
            if bad.size:
                warnings.warn(
                    "supplied B_ii overridden by incident-line sums for areas "
                    f"{[int(i) for i in bad]} (max mismatch {mismatch[bad].max():.3g})",
                    stacklevel=2)
        self.B_ii = derived

        for name in ("T_p", "T_t", "T_g", "T_V", "K_p", "R", "X_d", "X_d_prime", "E_f", "D"):
            setattr(self, name, np.array([getattr(a, name) for a in areas]))
        self.XmX = self.X_d - self.X_d_prime
        self.E_diag = 1.0 / self.XmX - self.B_ii


@dataclass
class PhysicalState:
    """Network-side dynamic state: per-line angle differences eta plus
    per-area frequency deviation, voltage, turbine and governor outputs."""

    eta: np.ndarray
    f: np.ndarray
    V: np.ndarray
    P_t: np.ndarray
    P_g: np.ndarray

    def validate(self, network: Network):
        n, m = network.n, network.m
        for name, size in (("eta", m), ("f", n), ("V", n), ("P_t", n), ("P_g", n)):
            if np.shape(getattr(self, name)) != (size,):
                raise ValidationError(ValidationIssue(
                    "state.dimensions", f"state.{name}",
                    f"expected shape ({size},), got {np.shape(getattr(self, name))}"))
        if np.any(self.V <= 0.0):
            raise ValidationError(ValidationIssue(
                "state.positive-voltage", "state.V", f"voltages must be positive, got {self.V}"))


def assemble_E(eta, network: Network) -> np.ndarray:
    """Voltage coupling matrix E(eta): diagonal 1/(X_d - X'_d) - B_ii,
    off-diagonal B_ij cos(eta_k) on lines.  Symmetric by construction and
    positive definite for every eta because the diagonal strictly
    dominates (|B_ii| equals the sum of incident |B_ij| and the extra
    reactance term is positive)."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (network.m,):
        raise ValidationError(ValidationIssue(
            "state.dimensions", "eta", f"expected shape ({network.m},), got {eta.shape}"))
    E = np.diag(network.E_diag.copy())
    c = network.line_b * np.cos(eta)
    for k in range(network.m):
        i, j = network.line_from[k], network.line_to[k]
        E[i, j] += c[k]
        E[j, i] += c[k]
    return E


def line_flows(eta, V, network: Network) -> np.ndarray:
    """Per-line quantity Gamma(V)_k sin(eta_k) with Gamma(V)_k = V_i V_j B_ij."""
    eta = np.asarray(eta, dtype=float)
    V = np.asarray(V, dtype=float)
    return network.line_b * V[network.line_from] * V[network.line_to] * np.sin(eta)


def net_injection(eta, V, network: Network) -> np.ndarray:
    """Per-area tie-line power term: incidence @ (Gamma(V) sin(eta)).

    Row i equals sum_j V_i V_j B_ij sin(delta_i - delta_j); the all-ones
    left null vector of the incidence makes the total exactly zero
    (lossless lines)."""
    return network.incidence @ line_flows(eta, V, network)


def network_rhs(state: PhysicalState, P_d, network: Network):
    """Time derivatives (eta', f', V') of the network-side states."""
    P_d = np.asarray(P_d, dtype=float)
    deta = np.empty(network.m)
    df = np.empty(network.n)
    dV = np.empty(network.n)
    _k.network_rhs_kernel(
        np.ascontiguousarray(state.eta, dtype=float), np.ascontiguousarray(state.f, dtype=float),
        np.ascontiguousarray(state.V, dtype=float), np.ascontiguousarray(state.P_t, dtype=float),
        np.ascontiguousarray(P_d), network.T_p, network.K_p, network.T_V, network.XmX,
        network.E_f, network.E_diag, network.line_from, network.line_to, network.line_b,
        deta, df, dV)
    return deta, df, dV


def turbine_governor_rhs(P_t, P_g, f, u, network: Network):
    """Time derivatives (P_t', P_g') of the turbine-governor chain."""
    dPt = np.empty(network.n)
    dPg = np.empty(network.n)
    _k.tg_rhs_kernel(
        np.ascontiguousarray(P_t, dtype=float), np.ascontiguousarray(P_g, dtype=float),
        np.ascontiguousarray(f, dtype=float), np.ascontiguousarray(u, dtype=float),
        network.T_t, network.T_g, network.R, dPt, dPg)
    return dPt, dPg


def security_margins(eta, V, network: Network) -> np.ndarray:
    """Per-area margin of the operating-point security condition

        1/(X_d - X'_d) - B_ii + sum_k B_ij (V_i + V_j sin^2 eta_k) / (V_i cos eta_k) > 0,

    which guarantees a strict local minimum of the network storage
    function at the operating point."""
    eta = np.asarray(eta, dtype=float)
    V = np.asarray(V, dtype=float)
    margins = network.E_diag.copy()
    for k in range(network.m):
        i, j = network.line_from[k], network.line_to[k]
        b = network.line_b[k]
        s2 = np.sin(eta[k]) ** 2
        c = np.cos(eta[k])
        margins[i] += b * (V[i] + V[j] * s2) / (V[i] * c)
        margins[j] += b * (V[j] + V[i] * s2) / (V[j] * c)
    return margins


@dataclass
class Equilibrium:
    """Solution of the steady-state algebraic equations at zero frequency."""

    eta: np.ndarray
    V: np.ndarray
    delta: np.ndarray
    residual: float
    iterations: int
    security: np.ndarray = field(default_factory=lambda: np.array([]))
    security_ok: bool = True
    eta_within_range: bool = True


def _equilibrium_residual(delta, V, p_net, network: Network):
    eta = network.incidence.T @ delta
    g = p_net + net_injection(eta, V, network)
    h = network.E_f - network.XmX * (assemble_E(eta, network) @ V)
    return g, h, eta


def _equilibrium_jacobian(delta, V, network: Network):
    """Analytic Jacobian of (power rows 1..n-1, voltage rows) w.r.t.
    (delta_1..delta_{n-1}, V).  Area 0 is the angle reference."""
    n, m = network.n, network.m
    eta = network.incidence.T @ delta
    li, lj, lb = network.line_from, network.line_to, network.line_b
    s, c = np.sin(eta), np.cos(eta)
    dG_ddelta = np.zeros((n, n))
    dG_dV = np.zeros((n, n))
    dH_ddelta = np.zeros((n, n))
    for k in range(m):
        i, j, b = li[k], lj[k], lb[k]
        gc = b * V[i] * V[j] * c[k]
        dG_ddelta[i, i] += gc
        dG_ddelta[i, j] -= gc
        dG_ddelta[j, j] += gc
        dG_ddelta[j, i] -= gc
        dG_dV[i, i] += b * V[j] * s[k]
        dG_dV[i, j] += b * V[i] * s[k]
        dG_dV[j, i] -= b * V[j] * s[k]
        dG_dV[j, j] -= b * V[i] * s[k]
        bs = b * s[k]
        dH_ddelta[i, i] += bs * V[j]
        dH_ddelta[i, j] -= bs * V[j]
        dH_ddelta[j, j] -= bs * V[i]
        dH_ddelta[j, i] += bs * V[i]
    E = assemble_E(eta, network)
    dH_dV = -(network.XmX[:, None] * E)
    dH_ddelta *= network.XmX[:, None]
    J = np.zeros((2 * n - 1, 2 * n - 1))
    J[:n - 1, :n - 1] = dG_ddelta[1:, 1:]
    J[:n - 1, n - 1:] = dG_dV[1:, :]
    J[n - 1:, :n - 1] = dH_ddelta[:, 1:]
    J[n - 1:, n - 1:] = dH_dV
    return J


def solve_equilibrium(P_t_target, network: Network, P_d=None, eta0=None, V0=None,
                      tol=1e-10, max_iter=50, balance_tol=1e-9):
    """Solve the zero-frequency steady-state equations for (eta, V).

    Newton iteration with step halving (up to 8 halvings on residual
    increase) on the per-area power balance and voltage equations, with
    angles parametrized as eta = incidence^T delta and area 0 as angle
    reference.  The targets must satisfy 1^T (P_t - P_d) = 0; the full
    residual (all 2n equations) must drop below ``tol`` in infinity norm.

    Returns an :class:`Equilibrium`; raises :class:`EquilibriumError` on
    imbalance or non-convergence.  Angle differences outside
    (-pi/2, pi/2) or a failed security condition are flagged on the
    result (and warned about), not errors.
    """
    n, m = network.n, network.m
    P_t_target = np.asarray(P_t_target, dtype=float)
    P_d = np.zeros(n) if P_d is None else np.asarray(P_d, dtype=float)
    p_net = P_t_target - P_d
    imbalance = abs(p_net.sum())
    if imbalance > balance_tol:
        raise EquilibriumError(
            f"zero-frequency equilibrium needs balanced targets; 1'(P_t - P_d) = {p_net.sum():.3e}")

    delta = np.zeros(n)
    if eta0 is not None:
        # least-squares angle recovery from a line-difference guess
        delta[1:] = np.linalg.lstsq(network.incidence.T[:, 1:], np.asarray(eta0, float), rcond=None)[0]
    V = np.ones(n) if V0 is None else np.asarray(V0, dtype=float).copy()

    g, h, eta = _equilibrium_residual(delta, V, p_net, network)
    res = max(np.abs(g).max(), np.abs(h).max())
    iterations = 0
    while res > tol and iterations < max_iter:
        F = np.concatenate([g[1:], h])
        J = _equilibrium_jacobian(delta, V, network)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError(f"singular Jacobian at iteration {iterations}",
                                   residual=res, iterations=iterations) from exc
        t = 1.0
        for _ in range(9):
            delta_t = delta.copy()
            delta_t[1:] += t * dx[:n - 1]
            V_t = V + t * dx[n - 1:]
            g_t, h_t, eta_t = _equilibrium_residual(delta_t, V_t, p_net, network)
            res_t = max(np.abs(g_t).max(), np.abs(h_t).max())
            if res_t < res or t <= 1.0 / 256.0:
                break
            t *= 0.5
        delta, V, g, h, eta, res = delta_t, V_t, g_t, h_t, eta_t, res_t
        iterations += 1

    if res > tol:
        raise EquilibriumError(
            f"equilibrium Newton did not converge in {max_iter} iterations; residual {res:.3e}",
            residual=res, iterations=iterations)

    margins = security_margins(eta, V, network)
    within = bool(np.all(np.abs(eta) < np.pi / 2))
    if not within:
        warnings.warn(f"equilibrium angle differences outside (-pi/2, pi/2): max |eta| = {np.abs(eta).max():.3f}",
                      stacklevel=2)
    return Equilibrium(eta=eta, V=V, delta=delta, residual=res, iterations=iterations,
                       security=margins, security_ok=bool(np.all(margins > 0.0)),
                       eta_within_range=within)
