import numpy as np
import pytest

from hazardnav.env import (
    Action,
    EpisodeDone,
    NavEnv,
    NavWorld,
    NoiseConfig,
    Observation,
    RewardParams,
    WorldError,
    inject_noise,
    noise_bounds,
    sample_start_goal,
)


def _world(plan=None, gt=None, start=(2, 2), goal=(2, 5), shape=(6, 8), horizon=1000):
    plan = np.zeros(shape, bool) if plan is None else plan
    gt = np.zeros(shape, bool) if gt is None else gt
    return NavWorld(gt, plan, start, goal, horizon)


def test_reward_examples():
    plan = np.zeros((6, 8), bool)
    plan[1, 2] = True
    env = NavEnv(_world(plan))
    env.reset()
    assert env.step(Action.UP)[1] == -1.05
    env.reset()
    _, r, done, _ = env.step(Action.RIGHT)
    assert r == 0.95 and not done
    env.step(Action.RIGHT)
    _, r, done, info = env.step(Action.RIGHT)
    assert r == 50.95 and done and info["success"]

    edge = NavEnv(_world(start=(0, 0), goal=(5, 7)))
    edge.reset()
    obs, r, done, info = edge.step(Action.UP)
    assert r == -0.05 and info["pose"] == (0, 0) and not done


def test_reward_small_values_are_exact():
    env = NavEnv(_world(), RewardParams(kappa=0.05, beta=50))
    env.reset()
    _, r, _, _ = env.step(Action.LEFT)  # moving away from the goal
    assert r == -1.05


def test_observation_fields():
    plan = np.zeros((8, 8), bool)
    plan[1, 3] = True
    env = NavEnv(_world(plan, start=(2, 3), goal=(5, 7), shape=(8, 8)))
    obs = env.reset()
    assert (obs.d_row, obs.d_col, obs.goal_distance) == (3, 4, 7)
    assert obs.legal[Action.UP] == 0 and obs.rim_dist == 1 and obs.inside == 0
    assert env.observe((1, 3)).inside == 1 and env.observe((1, 3)).rim_dist == 0


def test_empty_plan_sentinel_and_edge_legality():
    env = NavEnv(_world(start=(0, 4), goal=(5, 0)))
    obs = env.reset()
    assert obs.rim_dist == 6 + 8 and obs.inside == 0
    assert obs.legal == (0, 1, 1, 1)


def test_world_validation():
    plan = np.zeros((4, 4), bool)
    plan[0, 0] = True
    with pytest.raises(WorldError):
        NavWorld(plan, plan, (0, 0), (3, 3))
    with pytest.raises(WorldError):
        NavWorld(plan, plan, (1, 1), (1, 1))
    with pytest.raises(WorldError):
        NavWorld(plan, np.zeros((3, 4), bool), (1, 1), (2, 2))
    with pytest.raises(WorldError):
        NavWorld(plan, plan, (1, 1), (9, 2))


def test_step_after_done_and_horizon():
    env = NavEnv(_world(horizon=3))
    env.reset()
    for _ in range(2):
        assert not env.step(Action.LEFT)[2]
    _, _, done, info = env.step(Action.LEFT)
    assert done and info["truncated"] and not info["success"] and info["t"] == 3
    with pytest.raises(EpisodeDone):
        env.step(Action.UP)
    env.reset()
    with pytest.raises(ValueError):
        env.step(7)


def test_noise_degenerate_cases(rng):
    obs = Observation(3, -2, 4, 0, (1, 1, 1, 1))
    assert inject_noise(obs, NoiseConfig(sigma=0.0, enabled=True), rng, (8, 8)) == obs
    assert inject_noise(obs, NoiseConfig(p=0.0, enabled=True), rng, (8, 8)) == obs


def test_noise_clip_bounds(rng):
    (lo, hi), _, _ = noise_bounds((16, 16), 1.0)
    assert (lo, hi) == (-18.0, 18.0)
    obs = Observation(15, -15, 0, 1, (0, 1, 0, 1))
    for _ in range(500):
        o = inject_noise(obs, NoiseConfig(sigma=5.0, enabled=True), rng, (16, 16))
        assert -30 <= o.d_row <= 30 and -30 <= o.d_col <= 30
        assert o.inside == 1 and o.legal == (0, 1, 0, 1)


def test_noisy_episode_differs_and_is_reproducible():
    world = _world()
    actions = [1, 1, 2, 3, 0, 1, 1]

    def run(noise, seed):
        env = NavEnv(world, noise=noise)
        out = [env.reset(seed=seed)]
        for a in actions:
            obs, r, done, _ = env.step(a)
            out.append((obs, r))
            if done:
                break
        return out

    noisy = NoiseConfig(sigma=1.0, p=1.0, enabled=True)
    assert run(noisy, 4) == run(noisy, 4)
    assert run(noisy, 4) != run(None, 4)
    assert run(NoiseConfig(enabled=False), 4) == run(None, 4)


def test_gt_info_independent_of_plan(rng):
    gt = rng.random((6, 8)) < 0.3
    gt[2, 2] = gt[2, 5] = False
    plan_a = np.zeros((6, 8), bool)
    plan_b = rng.random((6, 8)) < 0.4
    plan_b[2, 2] = plan_b[2, 5] = False
    actions = rng.integers(4, size=40)
    infos = []
    for plan in (plan_a, plan_b):
        env = NavEnv(_world(plan, gt))
        env.reset()
        seq = []
        for a in actions:
            _, _, done, info = env.step(a)
            seq.append((info["in_gt_hazard"], info["gt_rim_dist"], info["pose"]))
            if done:
                break
        infos.append(seq)
    assert infos[0] == infos[1]


def test_reward_bounds_and_potential_consistency(rng):
    env = NavEnv(_world())
    lo, hi = env.rewards.bounds
    obs = env.reset()
    h0 = obs.goal_distance
    total_sgn = 0.0
    pose = (2, 2)
    for a in rng.integers(4, size=200):
        dr, dc = ((-1, 0), (0, 1), (1, 0), (0, -1))[a]
        nr, nc = pose[0] + dr, pose[1] + dc
        if not (0 <= nr < 6 and 0 <= nc < 8):
            continue  # keep to non-no-op moves
        obs, r, done, info = env.step(a)
        assert lo <= r <= hi
        total_sgn += round(r + env.rewards.kappa - (env.rewards.beta if info["success"] else 0.0))
        pose = info["pose"]
        if done:
            break
    assert total_sgn == h0 - obs.goal_distance


def test_sample_start_goal(rng):
    blocked = np.zeros((10, 10), bool)
    blocked[3:7, 3:7] = True
    for _ in range(20):
        s, g = sample_start_goal(blocked, rng)
        assert not blocked[s] and not blocked[g]
        assert abs(s.row - g.row) + abs(s.col - g.col) >= 5
    with pytest.raises(WorldError):
        sample_start_goal(np.ones((3, 3), bool), rng)
