"""Optimal load-frequency control on nonlinear multi-area power networks.

The package simulates a lossless power network partitioned into control
areas (flux-decay generator model plus second-order turbine-governor
dynamics) in closed loop with a distributed suboptimal second-order
sliding-mode controller that regulates frequency while steering the
generation split to the cost-minimizing dispatch.
"""

__version__ = "0.1.0"

from .network import (
    AreaParams,
    NetworkTopology,
    Network,
    PhysicalState,
    build_incidence,
    assemble_E,
    line_flows,
    network_rhs,
    turbine_governor_rhs,
    solve_equilibrium,
)
from .dispatch import CostModel, DispatchResult, total_cost, optimal_dispatch, steady_state_frequency
from .controller import (
    ControllerConfig,
    SsosmMemory,
    OperatingEnvelope,
    sliding_function,
    build_A,
    consensus_rhs,
    ssosm_step,
    gain_bounds,
    sliding_derivative,
    equivalent_rhs,
    primal_dual_rhs,
)
from .simulate import Scenario, LoadEvent, SystemState, Trajectory, step, run_scenario, run_batch
from .analysis import (
    Thresholds,
    VerificationReport,
    storage_S1,
    storage_S2,
    storage_S3,
    convergence_metrics,
    cost_savings,
)
from .scenario_io import load_scenario, save_scenario, scenario_hash
