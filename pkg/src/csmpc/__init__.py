"""Safe planning among pedestrians with conformal prediction regions.

Pipeline: generate synthetic trajectories, fit a trajectory predictor,
calibrate per-step prediction regions on held-out data, then plan with the
regions as tightened collision constraints, open-loop or receding-horizon.
"""

from .conformal import (
    UNBOUNDED,
    CalibrationTable,
    CoverageReport,
    calibrate,
    conformal_quantile,
    empirical_coverage,
    nonconformity_score,
    quantile_index,
)
from .core import Dataset, ScenarioConfig, Trajectory, validate_dataset
from .dynamics import ConstraintSpec, ControlInput, RobotState, VehicleParams, bicycle_step, rollout
from .planner import (
    CostWeights,
    OcpSpec,
    PlannerConfig,
    PlanResult,
    SolverConfig,
    check_plan,
    mpc_step,
    open_loop_plan,
    solve_ocp,
)
from .predictors import PredictionSet, PredictorSpec, fit_autoregressive, predict
from .scenario import generate_dataset
from .simulation import BatchReport, RunLog, batch_evaluate, report_from_logs, run_closed_loop

__all__ = [
    "UNBOUNDED",
    "BatchReport",
    "CalibrationTable",
    "ConstraintSpec",
    "ControlInput",
    "CostWeights",
    "CoverageReport",
    "Dataset",
    "OcpSpec",
    "PlanResult",
    "PlannerConfig",
    "PredictionSet",
    "PredictorSpec",
    "RobotState",
    "RunLog",
    "ScenarioConfig",
    "SolverConfig",
    "Trajectory",
    "VehicleParams",
    "batch_evaluate",
    "bicycle_step",
    "calibrate",
    "check_plan",
    "conformal_quantile",
    "empirical_coverage",
    "fit_autoregressive",
    "generate_dataset",
    "mpc_step",
    "nonconformity_score",
    "open_loop_plan",
    "predict",
    "quantile_index",
    "report_from_logs",
    "rollout",
    "run_closed_loop",
    "solve_ocp",
    "validate_dataset",
]
