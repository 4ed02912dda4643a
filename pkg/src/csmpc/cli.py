"""Command-line front end: generate, fit, calibrate, coverage, plan, simulate, report.

Every subcommand reads a JSON config (``--config``), applies command-line
overrides, writes its artifacts atomically into ``--out`` and echoes the
effective config into each JSON artifact. Exit codes: 0 success, 1 invalid
input, 2 internal failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .conformal import (
    CalibrationTable,
    calibrate,
    calibration_scores,
    empirical_coverage,
    histogram_rows,
    normalize_mode,
)
from .core import Dataset, ScenarioConfig, validate_dataset, write_atomic
from .dynamics import ConstraintSpec, RobotState, VehicleParams, constraint_value
from .planner import (
    CostWeights,
    PlannerConfig,
    SolverConfig,
    build_ocp,
    open_loop_ocp,
    solve_with_fallback,
    window,
    window_regions,
)
from .predictors import PredictorSpec, fit_autoregressive, predict_from
from .scenario import generate_dataset
from .simulation import RunLog, batch_evaluate, report_from_logs


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    n_train: int = 200
    n_val: int = 500
    n_test: int = 500
    seed: int = 0
    order: int = 3
    predictor: str = "autoregressive"
    delta: float = 0.05
    T: int | None = None  # defaults to scenario.T
    H: int | None = None  # calibration horizon, defaults to T
    score_mode: str = "per-agent-max"
    coverage_kind: str = "joint-from-zero"
    mpc_horizon: int | None = None  # defaults to H
    goal_mode: str = "hard"
    slack: bool = True
    worst_case_regions: bool = False
    weights: CostWeights = field(default_factory=CostWeights)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sim_mode: str = "both"
    runs: int | None = None
    plan_t: int = 0
    plan_index: int | None = None
    open_loop: bool = False
    dataset: str = "dataset.json"
    predictor_path: str = "predictor.json"
    table: str = "calibration.json"

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta: must lie in (0, 1), got {self.delta}")
        if self.T is not None and self.T < 1:
            raise ConfigError("T: must be >= 1")
        if self.H is not None and not 1 <= self.H <= self.horizon_T:
            raise ConfigError(f"H: must satisfy 1 <= H <= T, got {self.H}")
        if self.mpc_horizon is not None and not 1 <= self.mpc_horizon <= self.cal_H:
            raise ConfigError(f"mpc_horizon: must satisfy 1 <= mpc_horizon <= H, got {self.mpc_horizon}")
        try:
            self.score_mode = normalize_mode(self.score_mode)
        except ValueError as e:
            raise ConfigError(f"score_mode: {e}") from None
        self.coverage_kind = {"joint": "joint-from-zero", "onestep": "one-step"}.get(
            self.coverage_kind, self.coverage_kind
        )
        if self.coverage_kind not in ("joint-from-zero", "one-step"):
            raise ConfigError(f"coverage_kind: unknown kind {self.coverage_kind!r}")
        self.sim_mode = {"openloop": "open-loop"}.get(self.sim_mode, self.sim_mode)
        if self.sim_mode not in ("mpc", "open-loop", "both"):
            raise ConfigError(f"sim_mode: unknown mode {self.sim_mode!r}")
        if self.predictor not in ("autoregressive", "constant-velocity"):
            raise ConfigError(f"predictor: must be autoregressive or constant-velocity, got {self.predictor!r}")
        if self.goal_mode not in ("hard", "soft"):
            raise ConfigError(f"goal_mode: must be hard or soft, got {self.goal_mode!r}")
        if self.runs is not None and self.runs < 1:
            raise ConfigError("runs: must be >= 1")

    @property
    def horizon_T(self) -> int:
        return self.scenario.T if self.T is None else self.T

    @property
    def cal_H(self) -> int:
        return self.horizon_T if self.H is None else self.H

    def planner(self) -> PlannerConfig:
        sc = self.scenario
        return PlannerConfig(
            dt=sc.dt,
            T=self.horizon_T,
            horizon=self.mpc_horizon if self.mpc_horizon is not None else self.cal_H,
            vehicle=self.vehicle,
            constraint=ConstraintSpec(sc.epsilon),
            weights=self.weights,
            goal_mode=self.goal_mode,
            goal_center=sc.goal_center,
            goal_radius=sc.goal_radius,
            workspace=sc.robot_bounds,
            worst_case_regions=self.worst_case_regions,
            slack_fallback=self.slack,
            solver=self.solver,
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        kw = dict(d)
        nested = {
            "scenario": ScenarioConfig.from_dict,
            "weights": lambda d: CostWeights(**d),
            "vehicle": lambda d: VehicleParams(**d),
            "solver": lambda d: SolverConfig(**d),
        }
        for name, build in nested.items():
            if name in kw and isinstance(kw[name], dict):
                try:
                    kw[name] = build(kw[name])
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"{name}: {e}") from None
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _csv(rows: list[list[Any]], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_json(path: Path, what: str) -> dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"{what}: file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what}: malformed JSON in {path}: {e}") from None


def _resolve(out: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else out / path


def load_dataset(path: Path) -> Dataset:
    try:
        ds = Dataset.from_dict(_read_json(path, "dataset"))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"dataset: {e}") from None
    problems = validate_dataset(ds)
    if problems:
        raise ConfigError("dataset: " + "; ".join(problems[:3]))
    return ds


def load_predictor(path: Path) -> PredictorSpec:
    d = _read_json(path, "predictor")
    return PredictorSpec.from_dict(d.get("predictor", d))


def load_table(path: Path) -> CalibrationTable:
    d = _read_json(path, "table")
    return CalibrationTable.from_dict(d.get("table", d))


# subcommands ---------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out: Path) -> str:
    ds = generate_dataset(cfg.scenario, cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed)
    write_atomic(_resolve(out, cfg.dataset), ds.to_json())
    write_atomic(out / "generate.json", _dump({"config": cfg.to_dict(), "trajectories": len(ds)}))
    return f"generated {cfg.n_train}/{cfg.n_val}/{cfg.n_test} train/val/test trajectories"


def cmd_fit(cfg: RunConfig, out: Path) -> str:
    ds = load_dataset(_resolve(out, cfg.dataset))
    if cfg.predictor == "constant-velocity":
        spec = PredictorSpec.constant_velocity()
    else:
        spec = fit_autoregressive(ds, cfg.order)
    write_atomic(_resolve(out, cfg.predictor_path), _dump({"config": cfg.to_dict(), "predictor": spec.to_dict()}))
    coef = ", ".join(f"{c:.4f}" for c in spec.coefficients)
    return f"fitted {spec.kind} q={spec.order} coefficients=({coef})" + (
        " [rank deficient]" if spec.rank_deficient else ""
    )


def cmd_calibrate(cfg: RunConfig, out: Path) -> str:
    ds = load_dataset(_resolve(out, cfg.dataset))
    spec = load_predictor(_resolve(out, cfg.predictor_path))
    T, H = cfg.horizon_T, cfg.cal_H
    table = calibrate(ds, spec, cfg.delta, T, H, cfg.score_mode)
    write_atomic(_resolve(out, cfg.table), _dump({"config": cfg.to_dict(), "table": table.to_dict()}))
    scores = calibration_scores(ds.subset("val"), spec, T, H, cfg.score_mode)
    write_atomic(
        out / "score_histograms.csv",
        _csv(histogram_rows(scores, table), ["t", "tau", "bin_lo", "bin_hi", "count", "C"]),
    )
    # regions are expected to shrink as t grows at a fixed tau; report, do not assume
    rising = sum(
        1
        for (t, tau), c in table.regions.items()
        if (t - 1, tau) in table.regions and c > table.regions[(t - 1, tau)]
    )
    return f"calibrated K_val={table.K_val} p={table.p} delta={cfg.delta} T={T} H={H}; {rising} entries grow with t"


def cmd_coverage(cfg: RunConfig, out: Path) -> str:
    ds = load_dataset(_resolve(out, cfg.dataset))
    spec = load_predictor(_resolve(out, cfg.predictor_path))
    table = load_table(_resolve(out, cfg.table))
    rep = empirical_coverage(ds, spec, table, cfg.coverage_kind)
    write_atomic(out / f"coverage_{rep.kind}.json", _dump({"config": cfg.to_dict(), "coverage": rep.to_dict()}))
    return f"{rep.kind} coverage {rep.rate:.4f} over {len(rep.passes)} test trajectories"


def _x0(cfg: RunConfig) -> RobotState:
    return RobotState(*cfg.scenario.robot_start)


def cmd_plan(cfg: RunConfig, out: Path) -> str:
    ds = load_dataset(_resolve(out, cfg.dataset))
    spec = load_predictor(_resolve(out, cfg.predictor_path))
    table = load_table(_resolve(out, cfg.table))
    pc = cfg.planner()
    test = ds.indices("test")
    index = test[0] if cfg.plan_index is None else cfg.plan_index
    if not 0 <= index < len(ds):
        raise ConfigError(f"plan_index: {index} out of range")
    env = ds.trajectories[index]
    t = 0 if cfg.open_loop else cfg.plan_t
    if not 0 <= t < pc.T:
        raise ConfigError(f"plan_t: must satisfy 0 <= t < T, got {t}")
    if cfg.open_loop:
        preds = predict_from(spec, env, 0, pc.T, pc.T)
        ocp = open_loop_ocp(preds, table, pc)
    else:
        preds = predict_from(spec, env, t, pc.H, pc.T)
        ocp = build_ocp(t, preds, window_regions(table, t, window(t, pc.H, pc.T), pc.worst_case_regions), pc)
    # the robot is placed at its start state at time t; plans from recorded states are a simulate concern
    result = solve_with_fallback(t, _x0(cfg), ocp)
    rows = []
    regions = dict(zip(ocp.taus, ocp.regions))
    for k, s in enumerate(result.states):
        tau = t + 1 + k
        c = constraint_value(s[:2], preds.at(tau), pc.constraint) if tau in regions else ""
        C = regions.get(tau, "")
        rows.append([tau, *(repr(float(v)) for v in s), repr(c) if c != "" else "", repr(C) if C != "" else ""])
    write_atomic(out / "plan.json", _dump({"config": cfg.to_dict(), "index": index, "plan": result.to_dict()}))
    write_atomic(out / "plan.csv", _csv(rows, ["tau", "x", "y", "theta", "v", "c", "C"]))
    return f"plan at t={t} on trajectory {index}: {result.status} cost={result.cost:.3f}"


def _write_report(rep, cfg_dict: dict[str, Any] | None, out: Path) -> None:
    body = {"config": cfg_dict, "report": rep.to_dict()} if cfg_dict is not None else {"report": rep.to_dict()}
    write_atomic(out / "report.json", _dump(body))
    write_atomic(out / "report.csv", _csv(rep.summary_rows(), ["mode", "metric", "value"]))
    if rep.pairs:
        rows = [[i, repr(a), repr(b), int(fa), int(fb)] for i, a, b, fa, fb in rep.pairs]
        write_atomic(
            out / "paired_costs.csv",
            _csv(rows, ["index", "open_loop_cost", "mpc_cost", "open_loop_flagged", "mpc_flagged"]),
        )


def cmd_simulate(cfg: RunConfig, out: Path) -> str:
    ds = load_dataset(_resolve(out, cfg.dataset))
    spec = load_predictor(_resolve(out, cfg.predictor_path))
    table = load_table(_resolve(out, cfg.table))
    pc = cfg.planner()
    if table.T != pc.T:
        raise ConfigError(f"T: calibration table has T={table.T}, config has T={pc.T}")
    idx = ds.indices("test")
    if cfg.runs is not None:
        idx = idx[: cfg.runs]
    rep, logs = batch_evaluate(ds, spec, table, pc, _x0(cfg), cfg.sim_mode, idx)
    runs_dir = out / "runs"
    for g in logs:
        write_atomic(runs_dir / f"{g.mode}_{g.index:06d}.json", _dump(g.to_dict()))
        write_atomic(
            runs_dir / f"{g.mode}_{g.index:06d}.csv",
            _csv(
                g.trajectory_rows(ds.trajectories[g.index]),
                ["t", "x", "y", "theta", "v", "c"]
                + [f"agent{j}_{a}" for j in range(ds.trajectories[g.index].n_agents) for a in "xy"],
            ),
        )
    _write_report(rep, cfg.to_dict(), out)
    parts = [
        f"{m}: violations {s.violations}/{s.runs}, flagged {s.flagged_runs}, mean cost {s.mean_cost:.2f}"
        for m, s in rep.summaries.items()
    ]
    return f"simulated {rep.runs} trajectories; " + "; ".join(parts)


def cmd_report(cfg: RunConfig, out: Path, src: Path | None) -> str:
    src = src or out
    runs_dir = src / "runs" if (src / "runs").is_dir() else src
    files = sorted(runs_dir.glob("*.json"))
    logs = []
    for f in files:
        d = _read_json(f, "run log")
        if "solves" in d and "mode" in d:
            logs.append(RunLog.from_dict(d))
    if not logs:
        raise ConfigError(f"in: no run logs found in {runs_dir}")
    rep = report_from_logs(logs)
    _write_report(rep, None, out)
    return f"report over {len(logs)} run logs ({rep.mode})"


# argument parsing -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


FLAG_FIELDS = {
    "seed": "seed",
    "order": "order",
    "delta": "delta",
    "T": "T",
    "H": "H",
    "mode_cal": "score_mode",
    "kind": "coverage_kind",
    "t": "plan_t",
    "index": "plan_index",
    "openloop": "open_loop",
    "mode_sim": "sim_mode",
    "runs": "runs",
    "mpc_horizon": "mpc_horizon",
    "dataset": "dataset",
    "predictor_path": "predictor_path",
    "table": "table",
    "goal_mode": "goal_mode",
    "slack": "slack",
    "worst_case": "worst_case_regions",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csmpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset")
    common.add_argument("--predictor", dest="predictor_path")
    common.add_argument("--table")
    sub.add_parser("generate", parents=[common], help="sample train/val/test trajectories")
    f = sub.add_parser("fit", parents=[common], help="fit the autoregressive predictor")
    f.add_argument("--order", type=int)
    c = sub.add_parser("calibrate", parents=[common], help="build the conformal region table")
    c.add_argument("--delta", type=float)
    c.add_argument("--T", type=int)
    c.add_argument("--H", type=int)
    c.add_argument("--mode", dest="mode_cal", choices=["joint", "agentmax", "joint-norm", "per-agent-max"])
    v = sub.add_parser("coverage", parents=[common], help="empirical coverage on the test split")
    v.add_argument("--kind", choices=["joint", "onestep", "joint-from-zero", "one-step"])
    pl = sub.add_parser("plan", parents=[common], help="solve one planning problem")
    pl.add_argument("--t", type=int)
    pl.add_argument("--index", type=int, help="dataset index of the environment")
    pl.add_argument("--openloop", action="store_const", const=True)
    for sp in (pl,):
        sp.add_argument("--goal-mode", dest="goal_mode", choices=["hard", "soft"])
    s = sub.add_parser("simulate", parents=[common], help="closed-loop batch evaluation")
    s.add_argument("--mode", dest="mode_sim", choices=["mpc", "openloop", "open-loop", "both"])
    s.add_argument("--runs", type=int)
    s.add_argument("--mpc-horizon", dest="mpc_horizon", type=int)
    s.add_argument("--goal-mode", dest="goal_mode", choices=["hard", "soft"])
    s.add_argument("--slack", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--worst-case", dest="worst_case", action="store_const", const=True)
    r = sub.add_parser("report", parents=[common], help="aggregate run logs")
    r.add_argument("--in", dest="src", type=Path, required=True)
    return p


def effective_config(args: argparse.Namespace) -> RunConfig:
    base: dict[str, Any] = {}
    if args.config is not None:
        base = _read_json(args.config, "config")
        if not isinstance(base, dict):
            raise ConfigError("config: top level must be a JSON object")
        base = base.get("config", base)
    cfg = RunConfig.from_dict(base)
    overrides = {
        fld: getattr(args, flag) for flag, fld in FLAG_FIELDS.items() if getattr(args, flag, None) is not None
    }
    if overrides:
        cfg = RunConfig.from_dict({**_shallow(cfg), **overrides})
    return cfg


def _shallow(cfg: RunConfig) -> dict[str, Any]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        handlers = {
            "generate": cmd_generate,
            "fit": cmd_fit,
            "calibrate": cmd_calibrate,
            "coverage": cmd_coverage,
            "plan": cmd_plan,
            "simulate": cmd_simulate,
        }
        if args.command == "report":
            msg = cmd_report(cfg, out, args.src)
        else:
            msg = handlers[args.command](cfg, out)
    except (ConfigError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is ours
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(msg)
    return 0


def main() -> None:
    sys.exit(dispatch())
