import numpy as np
import pytest

from csmpc.core import ScenarioConfig
from csmpc.scenario import AgentScript, child_rng, generate_dataset, sample_trajectory, walk


def test_noiseless_walker_stays_on_segment_with_fixed_spacing():
    start, goal, speed, dt = np.array([2.0, -1.0]), np.array([5.0, 1.0]), 0.8, 0.125
    pos = walk([AgentScript(start, goal, speed, 0.0)], 40, dt, np.zeros((40, 1, 2)))[:, 0]
    seg = goal - start
    length = np.linalg.norm(seg)
    s = (pos - start) @ seg / length**2
    perp = (pos - start) - s[:, None] * seg
    assert np.abs(perp).max() < 1e-12
    n_move = int(length // (speed * dt))
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    assert np.allclose(steps[:n_move], speed * dt, atol=1e-12)
    # arrives, then stays put
    assert np.allclose(pos[-1], goal, atol=1e-12)
    assert np.allclose(steps[n_move + 1 :], 0.0)


def test_same_rng_state_is_bit_exact():
    cfg = ScenarioConfig()
    a = sample_trajectory(cfg, child_rng(5, 3))
    b = sample_trajectory(cfg, child_rng(5, 3))
    assert np.array_equal(a.positions, b.positions)
    assert a.positions.shape == (cfg.h + cfg.T + 1, cfg.n_agents, 2)


def test_first_step_noise_std_matches_configuration():
    sigma = 0.05
    cfg = ScenarioConfig(n_agents=1, T=1, h=0, noise_scale=sigma, speed_range=(0.0, 0.0))
    rng = np.random.default_rng(0)
    disp = np.array([np.diff(sample_trajectory(cfg, rng).positions[:2, 0], axis=0)[0] for _ in range(10_000)])
    sd = disp.std(axis=0, ddof=1)
    assert np.all(np.abs(sd - sigma) < 0.03 * sigma)


def test_split_sizes_and_file_determinism():
    cfg = ScenarioConfig(T=5, h=3)
    ds = generate_dataset(cfg, 0, 500, 500, seed=7)
    assert len(ds) == 1000
    assert [len(ds.indices(s)) for s in ("train", "val", "test")] == [0, 500, 500]
    again = generate_dataset(cfg, 0, 500, 500, seed=7)
    assert ds.to_json() == again.to_json()


def test_index_streams_do_not_depend_on_dataset_size():
    cfg = ScenarioConfig(T=5, h=3)
    small = generate_dataset(cfg, 0, 2, 0, seed=7)
    big = generate_dataset(cfg, 0, 5, 0, seed=7)
    for i in range(2):
        assert np.array_equal(small.trajectories[i].positions, big.trajectories[i].positions)


def test_generation_order_does_not_change_multiset():
    cfg = ScenarioConfig(T=4, h=2)
    forward = [sample_trajectory(cfg, child_rng(11, i)).positions for i in range(6)]
    backward = [sample_trajectory(cfg, child_rng(11, i)).positions for i in reversed(range(6))]
    key = lambda a: a.tobytes()
    assert sorted(map(key, forward)) == sorted(map(key, backward))


def test_noiseless_agents_stay_in_workspace():
    cfg = ScenarioConfig(noise_scale=0.0, n_agents=4)
    ds = generate_dataset(cfg, 10, 10, 10, seed=2)
    xmin, xmax, ymin, ymax = cfg.workspace
    for tr in ds.trajectories:
        p = tr.positions
        assert (p[..., 0] >= xmin).all() and (p[..., 0] <= xmax).all()
        assert (p[..., 1] >= ymin).all() and (p[..., 1] <= ymax).all()


def test_speed_and_endpoints_respect_config():
    cfg = ScenarioConfig(noise_scale=0.0, speed_range=(0.5, 0.7), T=60, h=0)
    tr = sample_trajectory(cfg, np.random.default_rng(1))
    steps = np.linalg.norm(np.diff(tr.positions, axis=0), axis=2)
    moving = steps[steps > 1e-12]
    assert moving.max() <= 0.7 * cfg.dt + 1e-12


@pytest.mark.parametrize("ws", [(2.0, 2.0, -1.0, 1.0), (0.0, 1.0, 3.0, -3.0), (0.0, np.inf, 0.0, 1.0)])
def test_degenerate_workspace_rejected(ws):
    with pytest.raises(ValueError, match="workspace"):
        sample_trajectory(ScenarioConfig(workspace=ws), np.random.default_rng(0))


def test_counts_must_be_nonnegative():
    with pytest.raises(ValueError):
        generate_dataset(ScenarioConfig(), -1, 1, 1, seed=0)
    with pytest.raises(ValueError):
        generate_dataset(ScenarioConfig(), 0, 0, 0, seed=0)
