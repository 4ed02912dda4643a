"""Tightened optimal control problem and its single-shooting solver.

Collision constraints are tightened by the conformal region radius:
``c(x_tau, yhat_tau) >= L * C[t, tau]``. The problem is solved over the
control sequence ``u_t .. u_{T-1}`` with an augmented-Lagrangian penalty on
all state, goal and collision constraints. Each penalty stage is minimized by
projected quasi-Newton descent on the control box using exact adjoint
gradients of the rollout. Several starts are run and the best feasible
result kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .conformal import UNBOUNDED, CalibrationTable, Region
from .dynamics import (
    ConstraintSpec,
    ControlInput,
    RobotState,
    VehicleParams,
    bicycle_step,
    constraint_value,
    rollout_states,
)
from . import _kernels as _k
from .predictors import PredictionSet, PredictorSpec, predict

FEASIBLE = "feasible"
WITH_SLACK = "feasible-with-slack"
INFEASIBLE = "infeasible"
_RANK = {FEASIBLE: 0, WITH_SLACK: 1, INFEASIBLE: 2}


@dataclass(frozen=True)
class CostWeights:
    velocity: float = 1.0
    goal: float = 0.0
    effort: float = 0.01

    def __post_init__(self):
        if min(self.velocity, self.goal, self.effort) < 0:
            raise ValueError("cost weights must be >= 0")


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    mu0: float = 100.0
    mu_growth: float = 10.0
    stages: int = 5
    max_iter: int = 400
    random_starts: int = 4
    # internal back-off so converged plans clear constraints, not graze them
    margin: float = 1e-4
    # the goal back-off is kept below tol: its multiplier is large and the
    # margin would otherwise show up in the cost
    goal_margin: float = 1e-6
    ftol: float = 1e-10
    gtol: float = 1e-6
    seed: int = 0
    # stop escalating once every residual clears its margin; turning this off
    # runs all stages so multipliers converge (slower, more precise)
    early_stop: bool = True


@dataclass(frozen=True)
class PlannerConfig:
    dt: float = 0.125
    T: int = 20
    horizon: int | None = None
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    constraint: ConstraintSpec = field(default_factory=lambda: ConstraintSpec(0.25))
    weights: CostWeights = field(default_factory=CostWeights)
    goal_mode: str = "hard"
    goal_center: tuple[float, float] = (8.0, 0.0)
    goal_radius: float = 0.25
    workspace: tuple[float, float, float, float] = (-1.0, 10.0, -5.0, 5.0)
    worst_case_regions: bool = False
    slack_fallback: bool = True
    slack_weight: float = 100.0
    slack_cap: float = 0.2
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.goal_mode not in ("hard", "soft"):
            raise ValueError(f"goal_mode must be 'hard' or 'soft', got {self.goal_mode!r}")
        if self.horizon is not None and not 1 <= self.horizon:
            raise ValueError("horizon must be >= 1")

    @property
    def H(self) -> int:
        return self.T if self.horizon is None else min(self.horizon, self.T)


@dataclass(frozen=True)
class OcpSpec:
    t: int
    taus: tuple[int, ...]
    predictions: np.ndarray  # (len(taus), N, 2)
    regions: tuple[Region, ...]
    cfg: PlannerConfig
    slack: bool = False


@dataclass
class PlanResult:
    t: int
    controls: np.ndarray  # (T - t, 2): u_t .. u_{T-1}
    states: np.ndarray  # (T - t, 4): x_{t+1} .. x_T
    cost: float
    status: str
    max_violation: float
    slacks: np.ndarray
    iterations: int
    reason: str = ""
    fallback: str = "none"

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "status": self.status,
            "reason": self.reason,
            "fallback": self.fallback,
            "cost": self.cost,
            "max_violation": self.max_violation,
            "iterations": self.iterations,
            "controls": self.controls.tolist(),
            "states": self.states.tolist(),
            "slacks": self.slacks.tolist(),
        }


def window(t: int, H: int, T: int) -> tuple[int, ...]:
    return tuple(range(t + 1, min(t + H, T) + 1))


def window_regions(
    table: CalibrationTable, t: int, taus: Sequence[int], worst_case: bool = False
) -> tuple[Region, ...]:
    if worst_case:
        by_lag = table.worst_case_by_lag()
        return tuple(by_lag[tau - t] for tau in taus)
    return tuple(table.region(t, tau) for tau in taus)


def build_ocp(
    t: int,
    predictions: PredictionSet,
    regions: Sequence[Region],
    cfg: PlannerConfig,
    slack: bool = False,
) -> OcpSpec:
    taus = window(t, cfg.H, cfg.T)
    if len(regions) != len(taus):
        raise ValueError(f"need {len(taus)} region values, got {len(regions)}")
    preds = np.stack([predictions.at(tau) for tau in taus]) if taus else np.zeros((0, 1, 2))
    return OcpSpec(t, taus, preds, tuple(regions), cfg, slack)


class _Problem:
    """Objective, constraints and gradients for one OCP instance."""

    def __init__(self, t: int, x0: np.ndarray, spec: OcpSpec, solver: SolverConfig | None = None):
        cfg = spec.cfg
        self.cfg = cfg
        self.x0 = np.asarray(x0, dtype=float)
        self.m = cfg.T - t
        if self.m < 1:
            raise ValueError(f"no decisions left at t={t} (T={cfg.T})")
        self.rows = np.array(spec.taus, dtype=np.int64) - t
        self.preds = np.ascontiguousarray(spec.predictions, dtype=float)
        self.rhs = cfg.constraint.lipschitz * np.array(spec.regions, dtype=float)
        self.n_slack = len(self.rows) if spec.slack else 0
        self.hard_goal = cfg.goal_mode == "hard"
        veh = cfg.vehicle
        self.bounds = veh.control_bounds() * self.m + [(0.0, None)] * self.n_slack
        w = cfg.weights
        self.args = (
            self.m, self.x0, cfg.dt, veh.wheelbase, self.rows, self.preds, self.rhs,
            cfg.constraint.epsilon, bool(self.n_slack), cfg.slack_weight,
            np.asarray(cfg.goal_center, dtype=float), cfg.goal_radius, self.hard_goal,
            np.asarray(cfg.workspace, dtype=float), veh.v_max,
            np.array([w.velocity, w.goal, w.effort]),
        )
        self.n_coll = len(self.rows) * self.preds.shape[1]
        self.n_res = self.n_coll + 6 * self.m + (1 if self.hard_goal else 0)
        solver = solver or cfg.solver
        self.margin = np.full(self.n_res, solver.margin)
        if self.hard_goal:
            self.margin[-1] = solver.goal_margin

    def evaluate(self, z):
        """Cost J, flat residuals (<= 0 means satisfied), rollout and raw c values."""
        a = self.args
        cost, res, states, _, _, cval = _k.residuals(
            z, a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8], a[10], a[11], a[12], a[13], a[14], a[15]
        )
        return cost, res, states, cval

    def augmented(self, z, lam, mu):
        return _k.augmented(z, lam, mu, self.margin, *self.args)

def _unbounded_result(t, x0, spec, reason):
    m = spec.cfg.T - t
    u = np.zeros((m, 2))
    states = rollout_states(x0, u, spec.cfg.dt, spec.cfg.vehicle.wheelbase)
    return PlanResult(t, u, states[1:], math.inf, INFEASIBLE, math.inf, np.zeros(len(spec.taus)), 0, reason)


def _random_start(m: int, lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator, sign: float) -> np.ndarray:
    # swerve to one side for k steps, steer back for k steps: i.i.d. draws average
    # out to driving straight and rarely explore passing on the other side
    u = np.zeros((m, 2))
    k = int(rng.integers(1, m // 2 + 2))
    amp = sign * rng.uniform(0.3, 1.0) * hi[0]
    u[:k, 0] = amp
    u[k : 2 * k, 0] = -amp
    u[:, 0] += rng.normal(0.0, 0.05, m)
    u[:, 1] = rng.uniform(-0.15, 0.15) * (hi[1] - lo[1])
    return np.clip(u.ravel(), lo, hi)


def _start_points(prob: _Problem, t: int, warm_start, solver: SolverConfig) -> list[np.ndarray]:
    """Zero controls, the shifted previous plan, then seeded random swerves."""
    lo = np.array([b[0] for b in prob.bounds[: 2 * prob.m]])
    hi = np.array([b[1] for b in prob.bounds[: 2 * prob.m]])
    zeros_s = np.zeros(prob.n_slack)
    starts = [np.zeros(2 * prob.m + prob.n_slack)]
    if warm_start is not None:
        ws = np.asarray(warm_start, dtype=float).reshape(-1, 2)
        if len(ws) == prob.m:
            starts.append(np.concatenate([np.clip(ws.ravel(), lo, hi), zeros_s]))
    for i in range(solver.random_starts):
        rng = np.random.default_rng((solver.seed, t, i))
        z = _random_start(prob.m, lo, hi, rng, 1.0 if i % 2 == 0 else -1.0)
        starts.append(np.concatenate([z, zeros_s]))
    return starts


def _run_start(prob: _Problem, z0: np.ndarray, solver: SolverConfig):
    # optimize over controls divided by their bound so steering and
    # acceleration steps are on the same scale
    n = len(z0)
    sc = np.ones(n)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for i, (b_lo, b_hi) in enumerate(prob.bounds):
        if i < 2 * prob.m:
            sc[i] = max(abs(b_lo), abs(b_hi)) or 1.0
        lo[i] = -np.inf if b_lo is None else b_lo / sc[i]
        hi[i] = np.inf if b_hi is None else b_hi / sc[i]
    lam = np.zeros(prob.n_res)
    w = np.asarray(z0, dtype=float) / sc
    iters = 0
    for stage in range(solver.stages):
        mu = solver.mu0 * solver.mu_growth**stage
        w, it = _k.projected_lbfgs(
            w, lo, hi, sc, lam, mu, prob.margin, solver.max_iter, solver.ftol, solver.gtol, 10, *prob.args
        )
        iters += int(it)
        if not np.all(np.isfinite(w)):
            return None, iters
        _, res, _, _ = prob.evaluate(w * sc)
        gm = res + prob.margin
        lam = np.maximum(0.0, lam + mu * gm)
        if solver.early_stop and gm.max(initial=-math.inf) <= 0.0:
            break
    return w * sc, iters


def _assess(prob: _Problem, t: int, z, iters: int, solver: SolverConfig) -> PlanResult:
    cost, res, states, cval = prob.evaluate(z)
    u, s = z[: 2 * prob.m].reshape(prob.m, 2), z[2 * prob.m :]
    slacks = s.copy() if prob.n_slack else np.zeros(len(prob.rows))
    # violation of the tightened constraints with no slack credit
    raw = np.concatenate([prob.rhs - cval, res[prob.n_coll :]])
    max_violation = max(0.0, float(raw.max(initial=0.0)))
    if not np.isfinite(cost):
        status = INFEASIBLE
    elif max_violation <= solver.tol and np.all(slacks <= solver.tol):
        status = FEASIBLE
    elif prob.n_slack and float(res.max(initial=0.0)) <= solver.tol:
        status = WITH_SLACK
    else:
        status = INFEASIBLE
    return PlanResult(t, u.copy(), states[1:], float(cost), status, max_violation, slacks, iters)


def solve_ocp(
    t: int,
    x_t: RobotState,
    spec: OcpSpec,
    solver: SolverConfig | None = None,
    warm_start=None,
) -> PlanResult:
    """Minimize J over ``u_t .. u_{T-1}`` subject to the tightened constraints in ``spec``."""
    solver = solver or spec.cfg.solver
    x0 = x_t.as_array() if isinstance(x_t, RobotState) else np.asarray(x_t, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial robot state must be finite")
    if any(c is UNBOUNDED for c in spec.regions):
        return _unbounded_result(t, x0, spec, "unbounded prediction region")
    prob = _Problem(t, x0, spec, solver)
    best, best_z = None, None
    total_iters = 0

    def consider(p, z, iters):
        nonlocal best, best_z
        cand = _assess(p, t, z, iters, solver)
        if np.isfinite(cand.cost) and (
            best is None or _rank_key(cand, spec.cfg.slack_weight) < _rank_key(best, spec.cfg.slack_weight)
        ):
            best, best_z = cand, z

    for z0 in _start_points(prob, t, warm_start, solver):
        z, iters = _run_start(prob, z0, solver)
        total_iters += iters
        if z is not None:
            consider(prob, z, iters)
    if best is not None and best.status != FEASIBLE and prob.hard_goal and solver.goal_margin < solver.margin:
        # restoration: the small goal back-off can leave the terminal point a
        # hair outside the goal; redo the best start with the full back-off
        wide = replace(solver, goal_margin=solver.margin)
        z, iters = _run_start(_Problem(t, x0, spec, wide), best_z, wide)
        total_iters += iters
        if z is not None:
            consider(prob, z, iters)
    if best is None:
        out = _unbounded_result(t, x0, spec, "solver failure: non-finite cost")
        out.iterations = total_iters
        return out
    best.iterations = total_iters
    return best


def _rank_key(r: PlanResult, slack_weight: float):
    if r.status == INFEASIBLE:
        return (2, r.max_violation, r.cost)
    return (_RANK[r.status], 0.0, r.cost + slack_weight * float(np.sum(r.slacks)))


def check_plan(t: int, x_t: RobotState, spec: OcpSpec, result: PlanResult, tol: float = 1e-6) -> list[str]:
    """Re-evaluate a returned plan from scratch; empty list means every constraint holds."""
    cfg = spec.cfg
    problems = []
    s = x_t
    states = []
    for k, (phi, a) in enumerate(result.controls):
        if not cfg.vehicle.admissible((phi, a)):
            problems.append(f"control {t + k} out of bounds: ({phi}, {a})")
        s = bicycle_step(s, ControlInput(float(phi), float(a)), cfg.dt, cfg.vehicle.wheelbase)
        states.append(s)
    if not np.allclose([st.as_array() for st in states], result.states, rtol=0, atol=1e-9):
        problems.append("reported states differ from a fresh rollout")
    xmin, xmax, ymin, ymax = cfg.workspace
    for k, st in enumerate(states):
        tau = t + 1 + k
        if not (xmin - tol <= st.x <= xmax + tol and ymin - tol <= st.y <= ymax + tol):
            problems.append(f"state {tau} leaves the workspace")
        if not -tol <= st.v <= cfg.vehicle.v_max + tol:
            problems.append(f"state {tau} speed {st.v} out of range")
    for tau, yhat, c in zip(spec.taus, spec.predictions, spec.regions):
        st = states[tau - t - 1]
        val = constraint_value((st.x, st.y), yhat, cfg.constraint)
        if val < cfg.constraint.lipschitz * c - tol:
            problems.append(f"tightened constraint at tau={tau}: {val} < {cfg.constraint.lipschitz * c}")
    if cfg.goal_mode == "hard":
        end = states[-1]
        gd = math.hypot(end.x - cfg.goal_center[0], end.y - cfg.goal_center[1])
        if gd > cfg.goal_radius + tol:
            problems.append(f"terminal position {gd:.4f} m from goal")
    return problems


def braking_controls(x_t: RobotState, m: int, cfg: PlannerConfig) -> np.ndarray:
    """Straight wheels and the strongest deceleration that keeps speed nonnegative."""
    v = x_t.v
    out = np.zeros((m, 2))
    for k in range(m):
        a = max(cfg.vehicle.a_min, -v / cfg.dt)
        out[k, 1] = a
        v = v + cfg.dt * a
    return out


def solve_with_fallback(t: int, x_t: RobotState, spec: OcpSpec, warm_start=None) -> PlanResult:
    """Solve; on failure retry with slack; if that fails or slack exceeds the cap, brake."""
    cfg = spec.cfg
    first = solve_ocp(t, x_t, spec, cfg.solver, warm_start)
    if first.status == FEASIBLE:
        return first
    if first.reason == "unbounded prediction region":
        reason = first.reason
    elif not cfg.slack_fallback:
        reason = "infeasible"
    else:
        retry = solve_ocp(t, x_t, replace(spec, slack=True), cfg.solver, first.controls)
        retry.iterations += first.iterations
        if retry.status == FEASIBLE:
            # the relaxed solve landed on a point with zero slack: the original problem is solved
            return retry
        if retry.status == WITH_SLACK and float(np.max(retry.slacks, initial=0.0)) <= cfg.slack_cap:
            retry.fallback = "slack"
            return retry
        reason = "slack cap exceeded" if retry.status != INFEASIBLE else "infeasible with slack"
    u = braking_controls(x_t, cfg.T - t, cfg)
    states = rollout_states(x_t.as_array(), u, cfg.dt, cfg.vehicle.wheelbase)
    return PlanResult(
        t, u, states[1:], math.nan, INFEASIBLE, first.max_violation,
        np.zeros(len(spec.taus)), first.iterations, reason, "brake",
    )


def open_loop_ocp(predictions: PredictionSet, table: CalibrationTable, cfg: PlannerConfig) -> OcpSpec:
    """The ``t = 0`` problem over the full horizon with regions ``C[0, tau]``."""
    cfg = replace(cfg, horizon=None)
    taus = window(0, cfg.T, cfg.T)
    regions = window_regions(table, 0, taus, cfg.worst_case_regions)
    return build_ocp(0, predictions, regions, cfg)


def open_loop_plan(
    x0: RobotState, predictions: PredictionSet, table: CalibrationTable, cfg: PlannerConfig, warm_start=None
) -> PlanResult:
    """One solve at ``t = 0`` with ``H = T``."""
    spec = open_loop_ocp(predictions, table, cfg)
    return solve_ocp(0, x0, spec, cfg.solver, warm_start)


def mpc_step(
    t: int,
    x_t: RobotState,
    history: np.ndarray,
    predictor: PredictorSpec,
    table: CalibrationTable,
    cfg: PlannerConfig,
    warm_start=None,
    future: np.ndarray | None = None,
) -> tuple[ControlInput, PlanResult]:
    """Predict from the history observed through ``t``, re-solve, return the first control.

    ``warm_start`` is the previous plan's controls; it is shifted by one step here.
    """
    if not 0 <= t < cfg.T:
        raise ValueError(f"t={t} must satisfy 0 <= t < T={cfg.T}")
    preds = predict(predictor, history, t, cfg.H, cfg.T, future)
    taus = window(t, cfg.H, cfg.T)
    regions = window_regions(table, t, taus, cfg.worst_case_regions)
    spec = build_ocp(t, preds, regions, cfg)
    shifted = None
    if warm_start is not None and len(warm_start) == cfg.T - t + 1:
        shifted = np.asarray(warm_start)[1:]
    result = solve_with_fallback(t, x_t, spec, shifted)
    phi, a = result.controls[0]
    return ControlInput(float(phi), float(a)), result
