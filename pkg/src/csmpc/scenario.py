"""Synthetic goal-directed pedestrians with Gaussian step noise.

Each agent walks straight toward a private goal at a private speed and stops
(nominally) on arrival. Agents ignore the robot and each other, so every
trajectory is an independent draw from one fixed distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, ScenarioConfig, Trajectory


@dataclass(frozen=True)
class AgentScript:
    start: np.ndarray
    goal: np.ndarray
    speed: float
    noise_scale: float


def _check_workspace(cfg: ScenarioConfig) -> None:
    xmin, xmax, ymin, ymax = cfg.workspace
    if not (np.isfinite(cfg.workspace).all() and xmin < xmax and ymin < ymax):
        raise ValueError(f"workspace {cfg.workspace} cannot contain start/goal sampling")


def sample_scripts(cfg: ScenarioConfig, rng: np.random.Generator) -> list[AgentScript]:
    _check_workspace(cfg)
    xmin, xmax, ymin, ymax = cfg.workspace
    lo, hi = (xmin, ymin), (xmax, ymax)
    scripts = []
    for _ in range(cfg.n_agents):
        start = rng.uniform(lo, hi)
        goal = rng.uniform(lo, hi)
        speed = float(rng.uniform(*cfg.speed_range))
        scripts.append(AgentScript(start, goal, speed, cfg.noise_scale))
    return scripts


def walk(scripts: list[AgentScript], steps: int, dt: float, noise: np.ndarray) -> np.ndarray:
    """Integrate the walkers for ``steps`` steps; ``noise`` is standard normal, (steps, N, 2)."""
    n = len(scripts)
    pos = np.empty((steps + 1, n, 2))
    pos[0] = [s.start for s in scripts]
    goals = np.array([s.goal for s in scripts], dtype=float)
    step_len = np.array([s.speed * dt for s in scripts])
    sigma = np.array([s.noise_scale for s in scripts])[:, None]
    arrived = np.zeros(n, dtype=bool)
    for k in range(steps):
        p = pos[k]
        d = goals - p
        dist = np.hypot(d[:, 0], d[:, 1])
        reach = ~arrived & (dist <= step_len)
        move = ~arrived & ~reach
        nominal = np.zeros_like(p)
        nominal[reach] = d[reach]
        nominal[move] = d[move] * (step_len[move] / dist[move])[:, None]
        arrived |= reach
        pos[k + 1] = p + nominal + sigma * noise[k]
    return pos


def sample_trajectory(cfg: ScenarioConfig, rng: np.random.Generator) -> Trajectory:
    """Draw one trajectory of length ``h + T + 1``."""
    scripts = sample_scripts(cfg, rng)
    steps = cfg.h + cfg.T
    noise = rng.standard_normal((steps, cfg.n_agents, 2))
    return Trajectory(walk(scripts, steps, cfg.dt, noise), cfg.h)


def child_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_dataset(
    cfg: ScenarioConfig, k_train: int, k_val: int, k_test: int, seed: int
) -> Dataset:
    """Generate train/val/test trajectories; trajectory ``i`` depends only on ``(seed, i)``."""
    if min(k_train, k_val, k_test) < 0 or k_train + k_val + k_test < 1:
        raise ValueError("split counts must be nonnegative with at least one trajectory")
    _check_workspace(cfg)
    splits = ("train",) * k_train + ("val",) * k_val + ("test",) * k_test
    trajs = tuple(sample_trajectory(cfg, child_rng(seed, i)) for i in range(len(splits)))
    return Dataset(trajs, splits, seed, cfg)
