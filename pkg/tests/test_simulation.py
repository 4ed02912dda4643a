import json
import random

import numpy as np
import pytest

from csmpc.conformal import calibrate
from csmpc.core import ScenarioConfig, Trajectory
from csmpc.dynamics import ConstraintSpec, RobotState, constraint_value, rollout_states
from csmpc.planner import FEASIBLE, PlannerConfig
from csmpc.predictors import PredictorSpec, fit_autoregressive
from csmpc.scenario import generate_dataset
from csmpc.simulation import (
    RunLog,
    SplitOverlapError,
    batch_evaluate,
    realized_cost,
    report_from_logs,
    run_closed_loop,
)

from conftest import straight_walk

X0 = RobotState(0.0, 0.0, 0.0, 3.0)
T = 20


@pytest.fixture(scope="module")
def world():
    cfg = ScenarioConfig(T=T, h=4)
    ds = generate_dataset(cfg, 30, 60, 6, seed=5)
    spec = fit_autoregressive(ds, 2)
    table = calibrate(ds, spec, 0.5, T, T, "per-agent-max")
    pcfg = PlannerConfig(T=T, constraint=ConstraintSpec(cfg.epsilon))
    return ds, spec, table, pcfg


@pytest.fixture(scope="module")
def batch(world):
    ds, spec, table, pcfg = world
    return batch_evaluate(ds, spec, table, pcfg, X0, mode="both", workers=1)


def test_zero_error_oracle_runs_are_safe(world):
    ds, _, _, pcfg = world
    oracle = PredictorSpec.noisy_oracle(np.zeros((T, 2)))
    table = calibrate(ds, oracle, 0.5, T, T, "per-agent-max")
    assert all(c == 0.0 for c in table.regions.values())
    checked = 0
    for i in ds.indices("test"):
        log = run_closed_loop(ds.trajectories[i], oracle, table, pcfg, X0, "mpc", i)
        if all(s.status == FEASIBLE for s in log.solves):
            checked += 1
            assert log.safe and log.min_c >= 0
    assert checked >= 3


def test_far_agents_give_unconstrained_driving(world):
    _, spec, table, pcfg = world
    far = Trajectory(straight_walk([[100.0, 100.0]] * 3, [0.0, 0.0], 4, T, 3), 4)
    farther = Trajectory(straight_walk([[300.0, -300.0]] * 3, [0.0, 0.0], 4, T, 3), 4)
    a = run_closed_loop(far, spec, table, pcfg, X0, "mpc", 0)
    b = run_closed_loop(farther, spec, table, pcfg, X0, "mpc", 0)
    assert np.array_equal(a.states, b.states)
    assert a.min_c > 100 and a.safe and a.goal_reached


def test_run_is_deterministic_and_round_trips(world):
    ds, spec, table, pcfg = world
    i = ds.indices("test")[0]
    a = run_closed_loop(ds.trajectories[i], spec, table, pcfg, X0, "mpc", i)
    b = run_closed_loop(ds.trajectories[i], spec, table, pcfg, X0, "mpc", i)
    text = json.dumps(a.to_dict())
    assert text == json.dumps(b.to_dict())
    back = RunLog.from_dict(json.loads(text))
    assert json.dumps(back.to_dict()) == text


def test_log_shapes_and_recheck(batch, world):
    ds, _, _, pcfg = world
    _, logs = batch
    for log in logs:
        env = ds.trajectories[log.index]
        assert log.states.shape == (T + 1, 4) and log.controls.shape == (T, 2)
        assert np.allclose(log.states, rollout_states(log.states[0], log.controls, pcfg.dt), atol=0)
        fresh = [constraint_value(log.states[t, :2], env.at(t), pcfg.constraint) for t in range(1, T + 1)]
        assert log.safe == (min(fresh) >= 0)
        assert log.cost == pytest.approx(realized_cost(log.states, log.controls, pcfg))
        expected = T if log.mode == "mpc" else 1
        assert len(log.solves) == expected
        assert len(log.coverage) == T


def test_report_is_a_pure_fold(batch):
    report, logs = batch
    shuffled = list(logs)
    random.Random(0).shuffle(shuffled)
    assert json.dumps(report_from_logs(shuffled).to_dict()) == json.dumps(report.to_dict())
    reloaded = [RunLog.from_dict(json.loads(json.dumps(g.to_dict()))) for g in logs]
    assert json.dumps(report_from_logs(reloaded).to_dict()) == json.dumps(report.to_dict())


def test_report_fields(batch, world):
    ds, *_ = world
    report, logs = batch
    assert report.mode == "both" and report.runs == len(ds.indices("test"))
    assert set(report.summaries) == {"mpc", "open-loop"}
    for s in report.summaries.values():
        assert s.runs == report.runs
        for rate in (s.violation_rate, s.unflagged_violation_rate, s.infeasible_or_flagged_rate, s.coverage_rate):
            assert rate is None or 0.0 <= rate <= 1.0
        assert s.flagged_runs + s.unflagged_runs == s.runs
    assert len(report.pairs) == report.runs
    mpc = {g.index: g.cost for g in logs if g.mode == "mpc"}
    for idx, ol_cost, mpc_cost, *_ in report.pairs:
        assert mpc[idx] == mpc_cost
    assert report.delta == 0.5 and report.T == T and report.H == T


def test_parallel_matches_serial(world, batch):
    ds, spec, table, pcfg = world
    idx = ds.indices("test")[:3]
    par, _ = batch_evaluate(ds, spec, table, pcfg, X0, "mpc", idx, workers=2)
    ser, _ = batch_evaluate(ds, spec, table, pcfg, X0, "mpc", idx, workers=1)
    assert json.dumps(par.to_dict()) == json.dumps(ser.to_dict())


def test_split_overlap_aborts(world):
    ds, spec, table, pcfg = world
    with pytest.raises(SplitOverlapError):
        batch_evaluate(ds, spec, table, pcfg, X0, "mpc", indices=[table.val_indices[0]])


def test_bad_inputs_rejected(world):
    ds, spec, table, pcfg = world
    env = ds.trajectories[ds.indices("test")[0]]
    with pytest.raises(ValueError):
        run_closed_loop(env, spec, table, pcfg, X0, "teleport")
    with pytest.raises(ValueError):
        batch_evaluate(ds, spec, table, pcfg, X0, "teleport")
    with pytest.raises(ValueError):
        batch_evaluate(ds, spec, table, pcfg, X0, "mpc", indices=[])
    short = PlannerConfig(T=10)
    with pytest.raises(ValueError):
        run_closed_loop(env, spec, table, short, X0)
