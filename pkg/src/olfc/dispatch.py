"""Economic dispatch: quadratic cost models, the closed-form optimum under
the supply-demand balance constraint, and the steady-state frequency that
results from a constant governor setpoint."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError, ValidationIssue


@dataclass(frozen=True)
class CostModel:
    """Per-area cost C_i(P) = 0.5 Q_i P^2 + Rlin_i P + C0_i (currency/h)."""

    Q: np.ndarray
    Rlin: np.ndarray
    C0: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "Rlin", np.broadcast_to(np.asarray(self.Rlin, dtype=float), q.shape).copy())
        object.__setattr__(self, "C0", np.broadcast_to(np.asarray(self.C0, dtype=float), q.shape).copy())
        if np.any(self.Q <= 0.0):
            raise ValidationError(ValidationIssue(
                "cost.Q-strictly-positive", "cost.Q",
                f"quadratic coefficients must be > 0 for strict convexity, got {self.Q}"))

    @property
    def n(self):
        return self.Q.shape[0]

    def marginal(self, P_t):
        """Marginal costs Q P + Rlin."""
        return self.Q * np.asarray(P_t, dtype=float) + self.Rlin

    def scaled(self, factor):
        """Uniformly rescaled model (same optimizer, costs scaled by ``factor``)."""
        return CostModel(self.Q * factor, self.Rlin * factor, self.C0 * factor)


@dataclass(frozen=True)
class DispatchResult:
    """Cost-minimizing generation split and the common marginal cost."""

    P_t_opt: np.ndarray
    lambda_opt: float
    within_plausible_bounds: bool = True


def total_cost(P_t, model: CostModel) -> float:
    """Aggregate generation cost sum_i 0.5 Q_i P_i^2 + Rlin_i P_i + C0_i."""
    P_t = np.asarray(P_t, dtype=float)
    return float(np.sum(0.5 * model.Q * P_t ** 2 + model.Rlin * P_t + model.C0))


def optimal_dispatch(P_d, model: CostModel, plausibility_bound=1.0) -> DispatchResult:
    """Closed-form minimizer of the total cost subject to 1'P_t = 1'P_d.

    lambda_opt = 1'(P_d + Q^-1 Rlin) / (1'Q^-1 1) and
    P_t_opt = Q^-1 (lambda_opt - Rlin); at the optimum all marginal costs
    equal lambda_opt.  Results beyond ``plausibility_bound`` p.u. in
    magnitude are flagged (never altered).
    """
    P_d = np.asarray(P_d, dtype=float)
    qinv = 1.0 / model.Q
    lam = float(np.sum(P_d + qinv * model.Rlin) / np.sum(qinv))
    P_opt = qinv * (lam - model.Rlin)
    return DispatchResult(P_t_opt=P_opt, lambda_opt=lam,
                          within_plausible_bounds=bool(np.all(np.abs(P_opt) <= plausibility_bound)))


def steady_state_frequency(u_bar, P_d, network) -> float:
    """Uniform steady-state frequency deviation for a constant setpoint:

        f* = 1'(u_bar - P_d) / (1'(K_p^-1 + R^-1) 1).
    """
    u_bar = np.asarray(u_bar, dtype=float)
    P_d = np.asarray(P_d, dtype=float)
    return float(np.sum(u_bar - P_d) / np.sum(1.0 / network.K_p + 1.0 / network.R))
