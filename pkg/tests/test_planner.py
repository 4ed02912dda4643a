import math
import warnings

import numpy as np
import pytest
from scipy.optimize import minimize

from csmpc import _kernels
from csmpc.conformal import UNBOUNDED, CalibrationTable
from csmpc.dynamics import ControlInput, RobotState, bicycle_step, constraint_value, rollout_gradient, rollout_states
from csmpc.planner import (
    FEASIBLE,
    INFEASIBLE,
    CostWeights,
    PlannerConfig,
    SolverConfig,
    _Problem,
    build_ocp,
    check_plan,
    mpc_step,
    open_loop_ocp,
    open_loop_plan,
    solve_ocp,
    solve_with_fallback,
    window,
    window_regions,
)
from csmpc.predictors import PredictionSet, PredictorSpec, predict

X0 = RobotState(0.0, 0.0, 0.0, 3.0)
GOAL = np.array([8.0, 0.0])
# converges the multipliers and the inner solves to near machine precision
PRECISE = SolverConfig(ftol=0, gtol=1e-10, max_iter=1000, margin=0, goal_margin=0, stages=8,
                       early_stop=False, random_starts=0)


def static_predictions(agents, T, t=0):
    agents = np.asarray(agents, dtype=float)
    return PredictionSet(t, np.tile(agents, (T - t, 1, 1)))


def constant_table(T, c, H=None):
    H = T if H is None else H
    regions = {(t, tau): c for t in range(T) for tau in range(t + 1, min(t + H, T) + 1)}
    return CalibrationTable(0.05, T, H, 1, "per-agent-max", 10, regions)


def unconstrained_oracle(cfg, x0, hard):
    """Best of several scipy solves of the same cost with control bounds and the goal only."""
    m, wv, wg, we = cfg.T, cfg.weights.velocity, cfg.weights.goal, cfg.weights.effort

    def J(z):
        u = z.reshape(-1, 2)
        s = rollout_states(x0.as_array(), u, cfg.dt)
        g = np.zeros_like(s)
        g[1:, 3] = 2 * wv * s[1:, 3]
        val = wv * np.sum(s[1:, 3] ** 2) + we * np.sum(u**2)
        if not hard:
            g[-1, :2] += 2 * wg * (s[-1, :2] - GOAL)
            val += wg * np.sum((s[-1, :2] - GOAL) ** 2)
        return val, rollout_gradient(s, u, g, cfg.dt).ravel() + 2 * we * z

    def goal_gap(z):
        s = rollout_states(x0.as_array(), z.reshape(-1, 2), cfg.dt)
        return cfg.goal_radius - np.hypot(*(s[-1, :2] - GOAL))

    bounds = cfg.vehicle.control_bounds() * m
    rng = np.random.default_rng(0)
    best = math.inf
    for i in range(4):
        z0 = np.zeros(2 * m) if i == 0 else rng.uniform(-0.2, 0.2, 2 * m)
        if hard:
            with warnings.catch_warnings():
                # SLSQP clips its own out-of-bounds trial points
                warnings.simplefilter("ignore", RuntimeWarning)
                o = minimize(J, z0, jac=True, method="SLSQP", bounds=bounds,
                             constraints=[dict(type="ineq", fun=goal_gap)], options=dict(ftol=1e-14, maxiter=1000))
            if goal_gap(o.x) < -1e-9:
                continue
        else:
            o = minimize(J, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                         options=dict(ftol=1e-15, gtol=1e-12, maxiter=5000))
        best = min(best, o.fun)
    return best


# ---------------------------------------------------------------- kernels


def test_kernel_rollout_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = int(rng.integers(1, 30))
        x0 = rng.uniform([-2, -2, -3, 0], [2, 2, 3, 4])
        u = rng.uniform([-0.6, -3], [0.6, 3], (m, 2))
        ref = rollout_states(x0, u, 0.125)
        got = _kernels.rollout(x0, u, 0.125, 1.0)
        assert np.allclose(got, ref, rtol=0, atol=1e-12)
        g = rng.normal(size=ref.shape)
        assert np.allclose(_kernels.adjoint(got, u, g, 0.125, 1.0), rollout_gradient(ref, u, g, 0.125), atol=1e-12)


@pytest.mark.parametrize("goal_mode, slack", [("hard", False), ("soft", True)])
def test_augmented_gradient_matches_finite_differences(goal_mode, slack):
    rng = np.random.default_rng(1)
    cfg = PlannerConfig(T=10, goal_mode=goal_mode, weights=CostWeights(1.0, 2.0, 0.05))
    agents = [[1.5, 0.2], [2.5, -0.4]]
    spec = build_ocp(0, static_predictions(agents, 10), [0.2] * 10, cfg, slack=slack)
    prob = _Problem(0, X0.as_array(), spec)
    z = np.concatenate([rng.uniform(-0.3, 0.3, 20), rng.uniform(0, 0.1, prob.n_slack)])
    lam = rng.uniform(0, 5, prob.n_res)
    f, g = prob.augmented(z, lam, 50.0)
    h = 1e-6
    fd = np.array([(prob.augmented(z + h * e, lam, 50.0)[0] - prob.augmented(z - h * e, lam, 50.0)[0]) / (2 * h)
                   for e in np.eye(len(z))])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-4)


def test_residual_layout_and_raw_constraint_values():
    cfg = PlannerConfig(T=6)
    agents = [[1.0, 0.5], [2.0, -1.0]]
    spec = build_ocp(0, static_predictions(agents, 6), [0.1] * 6, cfg)
    prob = _Problem(0, X0.as_array(), spec)
    z = np.zeros(12)
    cost, res, states, cval = prob.evaluate(z)
    assert len(res) == 6 * 2 + 6 * 6 + 1
    for r in range(6):
        p = states[r + 1, :2]
        assert cval[r] == pytest.approx(constraint_value(p, agents, cfg.constraint), abs=1e-12)
        for j in range(2):
            d = np.hypot(*(p - agents[j]))
            assert res[2 * r + j] == pytest.approx(0.1 - (d - 0.25), abs=1e-12)
    assert res[-1] == pytest.approx(np.hypot(*(states[-1, :2] - GOAL)) - 0.25)
    assert cost == pytest.approx(np.sum(states[1:, 3] ** 2))


# ---------------------------------------------------------------- solve_ocp


@pytest.mark.parametrize("hard", [False, True])
def test_far_agents_reach_unconstrained_optimum(hard):
    T = 12 if not hard else 20
    w = CostWeights(1.0, 5.0, 0.01) if not hard else CostWeights()
    cfg = PlannerConfig(T=T, goal_mode="hard" if hard else "soft", weights=w)
    spec = build_ocp(0, static_predictions([[50.0, 50.0]], T), [0.1] * T, cfg)
    r = solve_ocp(0, X0, spec)
    assert r.status == FEASIBLE
    assert r.cost == pytest.approx(unconstrained_oracle(cfg, X0, hard), abs=1e-4)


def test_unbounded_region_is_infeasible_immediately():
    cfg = PlannerConfig(T=8)
    regions = [0.1] * 7 + [UNBOUNDED]
    spec = build_ocp(0, static_predictions([[3.0, 0.0]], 8), regions, cfg)
    r = solve_ocp(0, X0, spec)
    assert r.status == INFEASIBLE and r.reason == "unbounded prediction region"
    assert r.iterations == 0
    assert solve_with_fallback(0, X0, spec).fallback == "brake"


def test_stationary_agent_on_path_is_avoided():
    cfg = PlannerConfig(T=20)
    spec = build_ocp(0, static_predictions([[4.0, 0.0]], 20), [0.1] * 20, cfg)
    r = solve_ocp(0, X0, spec)
    assert r.status == FEASIBLE
    s = X0
    for phi, a in r.controls:
        s = bicycle_step(s, ControlInput(phi, a), cfg.dt)
        assert constraint_value((s.x, s.y), [[4.0, 0.0]], cfg.constraint) >= 0.1 - 1e-6
    assert check_plan(0, X0, spec, r) == []


def test_plan_states_equal_rollout_of_controls():
    cfg = PlannerConfig(T=20)
    spec = build_ocp(0, static_predictions([[3.0, 0.4], [5.0, -0.3]], 20), [0.2] * 20, cfg)
    r = solve_ocp(0, X0, spec)
    assert np.array_equal(r.states, rollout_states(X0.as_array(), r.controls, cfg.dt)[1:])
    assert r.controls.shape == (20, 2) and r.states.shape == (20, 4)
    if r.status == FEASIBLE:
        assert r.max_violation <= cfg.solver.tol and np.all(r.slacks == 0)


def test_feasible_status_is_confirmed_by_independent_checker():
    rng = np.random.default_rng(3)
    cfg = PlannerConfig(T=20)
    seen = 0
    for _ in range(25):
        agents = rng.uniform([1, -1.5], [7, 1.5], (3, 2))
        spec = build_ocp(0, static_predictions(agents, 20), list(rng.uniform(0, 0.4, 20)), cfg)
        r = solve_ocp(0, X0, spec)
        if r.status == FEASIBLE:
            seen += 1
            assert check_plan(0, X0, spec, r) == []
    assert seen >= 10


def test_checker_catches_a_bad_plan():
    cfg = PlannerConfig(T=10)
    spec = build_ocp(0, static_predictions([[1.0, 0.0]], 10), [0.1] * 10, cfg)
    r = solve_ocp(0, X0, spec)
    r.controls = np.zeros_like(r.controls)
    problems = check_plan(0, X0, spec, r)
    assert any("fresh rollout" in p for p in problems)
    r.states = rollout_states(X0.as_array(), r.controls, cfg.dt)[1:]
    problems = check_plan(0, X0, spec, r)
    assert any("tightened constraint" in p for p in problems)
    assert any("goal" in p for p in problems)


def test_inflated_regions_never_lower_cost():
    rng = np.random.default_rng(4)
    cfg = PlannerConfig(T=20)
    compared = 0
    for _ in range(8):
        agents = rng.uniform([2, -1.0], [6, 1.0], (2, 2))
        base = list(rng.uniform(0.01, 0.05, 20))
        small = solve_ocp(0, X0, build_ocp(0, static_predictions(agents, 20), base, cfg))
        big = solve_ocp(0, X0, build_ocp(0, static_predictions(agents, 20), [10 * c for c in base], cfg))
        if small.status == FEASIBLE and big.status == FEASIBLE:
            compared += 1
            assert big.cost >= small.cost - 1e-6
    assert compared >= 4


def test_warm_start_never_worsens_cost():
    rng = np.random.default_rng(5)
    cfg = PlannerConfig(T=20)
    for _ in range(5):
        agents = rng.uniform([1.5, -1], [6, 1], (2, 2))
        spec = build_ocp(0, static_predictions(agents, 20), [0.15] * 20, cfg)
        cold = solve_ocp(0, X0, spec)
        guess = rng.uniform(-0.5, 0.5, (20, 2))
        warm = solve_ocp(0, X0, spec, warm_start=guess)
        if cold.status == FEASIBLE:
            assert warm.status == FEASIBLE
            assert warm.cost <= cold.cost + 1e-6


def test_solve_is_deterministic():
    cfg = PlannerConfig(T=10)
    spec = build_ocp(0, static_predictions([[3.0, 0.1]], 10), [0.2] * 10, cfg)
    a, b = solve_ocp(0, X0, spec), solve_ocp(0, X0, spec)
    assert np.array_equal(a.controls, b.controls) and a.cost == b.cost


def test_nonfinite_start_rejected():
    cfg = PlannerConfig(T=5)
    spec = build_ocp(0, static_predictions([[3.0, 0.0]], 5), [0.1] * 5, cfg)
    with pytest.raises(ValueError):
        solve_ocp(0, RobotState(math.nan, 0, 0, 1), spec)


# ---------------------------------------------------------------- fallback


def test_blocked_goal_triggers_slack_then_brake():
    cfg = PlannerConfig(T=10, slack_cap=0.2)
    # agent parked on the goal with a large region: no plan can reach the goal
    spec = build_ocp(0, static_predictions([GOAL], 10), [1.0] * 10, cfg)
    r = solve_with_fallback(0, X0, spec)
    assert r.status == INFEASIBLE and r.fallback == "brake"
    assert np.all(r.controls[:, 0] == 0.0)
    assert np.all(r.states[:, 3] >= 0.0)
    assert r.states[-1, 3] == 0.0


def test_small_conflict_is_absorbed_by_slack():
    # speed too low to swerve around an agent sitting just off the direct line
    cfg = PlannerConfig(T=20, slack_cap=0.5)
    spec = build_ocp(0, static_predictions([[4.0, 0.0]], 20), [1.0] * 20, cfg)
    first = solve_ocp(0, X0, spec)
    r = solve_with_fallback(0, X0, spec)
    if first.status == FEASIBLE:
        assert r.fallback == "none"
    else:
        assert r.fallback in ("slack", "brake")
        if r.fallback == "slack":
            assert 0 < r.slacks.max() <= 0.5


def test_without_slack_fallback_infeasible_goes_straight_to_brake():
    cfg = PlannerConfig(T=10, slack_fallback=False)
    spec = build_ocp(0, static_predictions([GOAL], 10), [1.0] * 10, cfg)
    r = solve_with_fallback(0, X0, spec)
    assert r.fallback == "brake" and r.reason == "infeasible"


# ---------------------------------------------------------------- windows and MPC


def test_window_bookkeeping():
    assert window(19, 5, 20) == (20,)
    assert window(0, 3, 20) == (1, 2, 3)
    assert window(17, 10, 20) == (18, 19, 20)


def test_worst_case_regions_dominate_per_t_entries():
    rng = np.random.default_rng(6)
    T, H = 10, 4
    regions = {(t, tau): float(rng.uniform(0, 1)) for t in range(T) for tau in range(t + 1, min(t + H, T) + 1)}
    table = CalibrationTable(0.1, T, H, 1, "joint-norm", 10, regions)
    for t in range(T):
        taus = window(t, H, T)
        worst = window_regions(table, t, taus, worst_case=True)
        plain = window_regions(table, t, taus)
        for tau, w, p in zip(taus, worst, plain):
            assert w >= p
            assert w == max(c for (s, u), c in regions.items() if u - s == tau - t)


def test_open_loop_plan_is_single_t0_solve():
    cfg = PlannerConfig(T=12, horizon=4)
    table = constant_table(12, 0.1)
    preds = static_predictions([[3.0, 0.5]], 12)
    spec = open_loop_ocp(preds, table, cfg)
    assert spec.taus == tuple(range(1, 13))
    r = open_loop_plan(X0, preds, table, cfg)
    assert r.t == 0 and len(r.controls) == 12


def test_mpc_last_step_window():
    cfg = PlannerConfig(T=6)
    hist = np.tile([[3.0, 2.0]], (5, 1, 1))
    x = RobotState(7.0, 0.0, 0.0, 0.5)
    u, res = mpc_step(5, x, hist, PredictorSpec.constant_velocity(), constant_table(6, 0.1), cfg)
    assert res.controls.shape == (1, 2)
    assert cfg.vehicle.admissible((u.phi, u.a))
    with pytest.raises(ValueError):
        mpc_step(6, x, hist, PredictorSpec.constant_velocity(), constant_table(6, 0.1), cfg)


@pytest.mark.parametrize("agents", [[[4.0, 0.3]], [[3.0, -0.1], [5.5, 0.6], [7.0, -1.5]]])
def test_mpc_matches_open_loop_under_perfect_information(agents):
    T = 20
    Y = np.asarray(agents)
    hist, fut = np.tile(Y, (6, 1, 1)), np.tile(Y, (T, 1, 1))
    table = constant_table(T, 0.1)
    cfg = PlannerConfig(T=T, solver=PRECISE)
    oracle = PredictorSpec.noisy_oracle(np.zeros((T, 2)))
    ol = open_loop_plan(X0, predict(oracle, hist, 0, T, T, fut), table, cfg)
    assert ol.status == FEASIBLE
    x, warm, first = X0, None, []
    for t in range(T):
        u, res = mpc_step(t, x, hist, oracle, table, cfg, warm, fut[: T - t])
        first.append((u.phi, u.a))
        warm = res.controls
        x = bicycle_step(x, u, cfg.dt)
    assert np.abs(np.array(first) - ol.controls).max() <= 1e-6
