"""Closed-loop and open-loop runs against recorded agent trajectories, and batch metrics.

The environment replays a held-out trajectory: agents ignore the robot. A
batch report is a pure fold over run logs, so it can be rebuilt from logs
written to disk.
"""

from __future__ import annotations

import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .conformal import UNBOUNDED, CalibrationTable, Region, batch_scores, covered
from .core import Dataset, Trajectory
from .dynamics import ControlInput, RobotState, bicycle_step, constraint_value
from .planner import (
    FEASIBLE,
    PlannerConfig,
    mpc_step,
    open_loop_ocp,
    solve_with_fallback,
    window,
    window_regions,
)
from .predictors import PredictorSpec, predict_from

MODES = ("mpc", "open-loop")


class SplitOverlapError(ValueError):
    pass


def _region_json(c: Region):
    return None if c is UNBOUNDED else c


def _region_from_json(c) -> Region:
    return UNBOUNDED if c is None else float(c)


@dataclass
class SolveRecord:
    """One call to the planner inside a run."""

    t: int
    observed: np.ndarray  # y_t, (N, 2)
    predictions: np.ndarray  # (len(window), N, 2)
    regions: list[Region]
    control: tuple[float, float]
    status: str
    fallback: str
    max_slack: float
    plan_cost: float
    iterations: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "observed": self.observed.tolist(),
            "predictions": self.predictions.tolist(),
            "regions": [_region_json(c) for c in self.regions],
            "control": list(self.control),
            "status": self.status,
            "fallback": self.fallback,
            "max_slack": self.max_slack,
            "plan_cost": None if math.isnan(self.plan_cost) else self.plan_cost,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SolveRecord":
        return cls(
            int(d["t"]),
            np.array(d["observed"], dtype=float),
            np.array(d["predictions"], dtype=float),
            [_region_from_json(c) for c in d["regions"]],
            tuple(d["control"]),
            d["status"],
            d["fallback"],
            float(d["max_slack"]),
            math.nan if d["plan_cost"] is None else float(d["plan_cost"]),
            int(d["iterations"]),
        )


@dataclass
class RunLog:
    index: int
    mode: str
    states: np.ndarray  # (T + 1, 4) realized robot states
    controls: np.ndarray  # (T, 2) applied controls
    c_values: np.ndarray  # (T + 1,) realized c(x_t, y_t)
    cost: float
    goal_reached: bool
    solves: list[SolveRecord]
    # prediction-region checks made during the run: one-step pairs for MPC, (0, tau) for open loop
    coverage: list[bool]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def min_c(self) -> float:
        return float(np.min(self.c_values[1:]))

    @property
    def safe(self) -> bool:
        return self.min_c >= 0.0

    @property
    def flagged(self) -> bool:
        return any(s.fallback == "brake" for s in self.solves)

    @property
    def infeasible_steps(self) -> int:
        """Solves that ended without a plan meeting every tightened constraint."""
        return sum(s.status != FEASIBLE for s in self.solves)

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "mode": self.mode,
            "meta": self.meta,
            "summary": {
                "min_c": self.min_c,
                "safe": self.safe,
                "cost": self.cost,
                "goal_reached": self.goal_reached,
                "flagged": self.flagged,
                "infeasible_steps": self.infeasible_steps,
            },
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "c_values": self.c_values.tolist(),
            "coverage": self.coverage,
            "solves": [s.to_dict() for s in self.solves],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunLog":
        return cls(
            int(d["index"]),
            d["mode"],
            np.array(d["states"], dtype=float),
            np.array(d["controls"], dtype=float).reshape(-1, 2),
            np.array(d["c_values"], dtype=float),
            float(d["summary"]["cost"]),
            bool(d["summary"]["goal_reached"]),
            [SolveRecord.from_dict(s) for s in d["solves"]],
            [bool(b) for b in d["coverage"]],
            dict(d.get("meta", {})),
        )

    def trajectory_rows(self, env: Trajectory | None = None) -> list[list[Any]]:
        """Rows (t, x, y, theta, v, c, agent coordinates...) for trajectory overlays."""
        rows = []
        for t, (s, c) in enumerate(zip(self.states, self.c_values)):
            row: list[Any] = [t, *(repr(float(v)) for v in s), repr(float(c))]
            if env is not None:
                row += [repr(float(v)) for v in env.at(t).ravel()]
            rows.append(row)
        return rows


def realized_cost(states: np.ndarray, controls: np.ndarray, cfg: PlannerConfig) -> float:
    """The planner's objective evaluated on what actually happened."""
    w = cfg.weights
    v = states[1:, 3]
    cost = w.velocity * float(v @ v) + w.effort * float(np.sum(controls * controls))
    if cfg.goal_mode == "soft":
        cost += w.goal * float(np.sum((states[-1, :2] - np.asarray(cfg.goal_center)) ** 2))
    return cost


def _record(t, env, plan, regions, preds, control) -> SolveRecord:
    return SolveRecord(
        t,
        np.array(env.at(t)),
        np.array(preds),
        list(regions),
        (float(control.phi), float(control.a)),
        plan.status,
        plan.fallback,
        float(np.max(plan.slacks, initial=0.0)),
        float(plan.cost),
        int(plan.iterations),
    )


def run_closed_loop(
    env: Trajectory,
    predictor: PredictorSpec,
    table: CalibrationTable,
    cfg: PlannerConfig,
    x0: RobotState,
    mode: str = "mpc",
    index: int = -1,
) -> RunLog:
    """Drive the robot through one recorded environment.

    ``mpc`` re-plans every step and applies the first control; ``open-loop``
    plans once at ``t = 0`` with ``H = T`` and executes the whole sequence.
    """
    if mode not in MODES:
        raise ValueError(f"unknown run mode {mode!r}")
    if table.T != cfg.T:
        raise ValueError(f"calibration table T={table.T} differs from planner T={cfg.T}")
    if env.T < cfg.T:
        raise ValueError(f"environment has {env.T} steps, planner needs {cfg.T}")
    T = cfg.T
    oracle = predictor.kind == "noisy-oracle"
    states = [x0]
    controls: list[ControlInput] = []
    solves: list[SolveRecord] = []
    coverage: list[bool] = []
    if mode == "open-loop":
        preds = predict_from(predictor, env, 0, T, T)
        spec = open_loop_ocp(preds, table, cfg)
        # same fallback policy as each MPC step
        plan = solve_with_fallback(0, x0, spec)
        regions = list(spec.regions)
        controls = [ControlInput(float(p), float(a)) for p, a in plan.controls]
        solves.append(_record(0, env, plan, regions, preds.values, controls[0]))
        scores = batch_scores(np.asarray(env.future(0, T)), preds.values, table.mode)
        coverage = [covered(float(s), c) for s, c in zip(scores, regions)]
        for u in controls:
            states.append(bicycle_step(states[-1], u, cfg.dt, cfg.vehicle.wheelbase))
    else:
        warm = None
        for t in range(T):
            x = states[-1]
            steps = len(window(t, cfg.H, T))
            future = env.future(t, steps) if oracle else None
            u, plan = mpc_step(t, x, env.history(t), predictor, table, cfg, warm, future)
            warm = plan.controls
            regions = window_regions(table, t, window(t, cfg.H, T), cfg.worst_case_regions)
            # the prediction is recomputed here only for the log and the coverage tally
            preds = predict_from(predictor, env, t, cfg.H, T)
            solves.append(_record(t, env, plan, regions, preds.values, u))
            score = batch_scores(np.asarray(env.at(t + 1))[None], preds.values[:1], table.mode)[0]
            coverage.append(covered(float(score), table.region(t, t + 1)))
            controls.append(u)
            states.append(bicycle_step(x, u, cfg.dt, cfg.vehicle.wheelbase))
    st = np.array([s.as_array() for s in states])
    ctrl = np.array([[u.phi, u.a] for u in controls]).reshape(-1, 2)
    c_vals = np.array([constraint_value(s.position, env.at(t), cfg.constraint) for t, s in enumerate(states)])
    goal = math.hypot(st[-1, 0] - cfg.goal_center[0], st[-1, 1] - cfg.goal_center[1]) <= cfg.goal_radius + 1e-6
    meta = {"T": T, "H": T if mode == "open-loop" else cfg.H, "delta": table.delta, "solver_seed": cfg.solver.seed}
    return RunLog(index, mode, st, ctrl, c_vals, realized_cost(st, ctrl, cfg), bool(goal), solves, coverage, meta)


def _mean(xs: Sequence[float]) -> float | None:
    # fsum keeps the fold independent of run order
    return math.fsum(xs) / len(xs) if xs else None


def _rate(k: int, n: int) -> float | None:
    return k / n if n else None


@dataclass
class ModeSummary:
    runs: int
    violations: int
    violation_rate: float | None
    unflagged_runs: int
    unflagged_violations: int
    unflagged_violation_rate: float | None
    flagged_runs: int
    infeasible_runs: int  # runs where any solve needed slack or braking
    infeasible_or_flagged_rate: float | None
    goal_reached: int
    mean_cost: float | None
    median_cost: float | None
    coverage_checks: int
    coverage_rate: float | None

    @classmethod
    def fold(cls, logs: Sequence[RunLog]) -> "ModeSummary":
        n = len(logs)
        bad = sum(not g.safe for g in logs)
        clean = [g for g in logs if not g.flagged]
        bad_clean = sum(not g.safe for g in clean)
        infeasible = sum(g.infeasible_steps > 0 for g in logs)
        costs = sorted(g.cost for g in logs)
        checks = [b for g in logs for b in g.coverage]
        return cls(
            n,
            bad,
            _rate(bad, n),
            len(clean),
            bad_clean,
            _rate(bad_clean, len(clean)),
            n - len(clean),
            infeasible,
            _rate(infeasible, n),
            sum(g.goal_reached for g in logs),
            _mean(costs),
            statistics.median(costs) if costs else None,
            len(checks),
            _rate(sum(checks), len(checks)),
        )


@dataclass
class BatchReport:
    mode: str
    runs: int
    delta: float
    T: int
    H: int
    solver_seed: int
    summaries: dict[str, ModeSummary]
    # (index, open-loop cost, mpc cost, open-loop flagged, mpc flagged) in "both" mode
    pairs: list[tuple[int, float, float, bool, bool]]

    def paired_means(self, clean_only: bool = True) -> tuple[float, float] | None:
        """Mean (open-loop, mpc) cost over pairs; ``clean_only`` drops pairs where either run braked."""
        rows = [p for p in self.pairs if not (clean_only and (p[3] or p[4]))]
        if not rows:
            return None
        return _mean([p[1] for p in rows]), _mean([p[2] for p in rows])

    def to_dict(self) -> dict[str, Any]:
        out = {
            "mode": self.mode,
            "runs": self.runs,
            "delta": self.delta,
            "T": self.T,
            "H": self.H,
            "solver_seed": self.solver_seed,
            "summaries": {k: v.__dict__ for k, v in self.summaries.items()},
            "pairs": [list(p) for p in self.pairs],
        }
        if self.pairs:
            out["paired_mean_cost"] = {
                "all": self.paired_means(False),
                "unflagged": self.paired_means(True),
            }
        return out

    def summary_rows(self) -> list[list[Any]]:
        rows = []
        for mode, s in self.summaries.items():
            for k, v in s.__dict__.items():
                rows.append([mode, k, "" if v is None else repr(v)])
        return rows


def report_from_logs(logs: Sequence[RunLog]) -> BatchReport:
    """Aggregate run logs; the result does not depend on their order."""
    if not logs:
        raise ValueError("no run logs to aggregate")
    logs = sorted(logs, key=lambda g: (g.mode, g.index))
    by_mode = {m: [g for g in logs if g.mode == m] for m in MODES}
    by_mode = {m: v for m, v in by_mode.items() if v}
    mode = "both" if len(by_mode) == 2 else next(iter(by_mode))
    pairs = []
    if mode == "both":
        mpc = {g.index: g for g in by_mode["mpc"]}
        for g in by_mode["open-loop"]:
            if g.index in mpc:
                h = mpc[g.index]
                pairs.append((g.index, g.cost, h.cost, g.flagged, h.flagged))
    meta = logs[0].meta
    H = by_mode["mpc"][0].meta.get("H") if "mpc" in by_mode else meta.get("H")
    return BatchReport(
        mode,
        len({g.index for g in logs}),
        meta.get("delta"),
        meta.get("T"),
        H,
        meta.get("solver_seed"),
        {m: ModeSummary.fold(v) for m, v in by_mode.items()},
        pairs,
    )


def worker_count() -> int:
    try:
        n = int(os.environ.get("CSMPC_THREADS", "1"))
    except ValueError:
        raise ValueError("CSMPC_THREADS must be an integer") from None
    return max(1, n)


def _job(args):
    return run_closed_loop(*args)


def batch_evaluate(
    test: Dataset,
    predictor: PredictorSpec,
    table: CalibrationTable,
    cfg: PlannerConfig,
    x0: RobotState,
    mode: str = "both",
    indices: Sequence[int] | None = None,
    workers: int | None = None,
) -> tuple[BatchReport, list[RunLog]]:
    """Run every test trajectory (or ``indices``) in ``mode`` in {mpc, open-loop, both}."""
    modes = {"both": MODES, "mpc": ("mpc",), "open-loop": ("open-loop",), "openloop": ("open-loop",)}.get(mode)
    if modes is None:
        raise ValueError(f"unknown batch mode {mode!r}")
    idx = list(test.indices("test") if indices is None else indices)
    if not idx:
        raise ValueError("batch evaluation needs at least one test trajectory")
    overlap = sorted(set(idx) & set(table.val_indices))
    if overlap:
        raise SplitOverlapError(f"test trajectories {overlap[:5]} were used for calibration")
    jobs = [(test.trajectories[i], predictor, table, cfg, x0, m, i) for i in idx for m in modes]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        logs = [_job(j) for j in jobs]
    return report_from_logs(logs), logs
