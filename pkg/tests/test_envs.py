from collections import deque

import numpy as np
import pytest

from ceqrdqn.envs import ChainWorld, TrapMaze, dump_trajectory, make_env
from ceqrdqn.evidential import DomainError


def shortest_path(env: TrapMaze, start, passable):
    seen = {start: 0}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        if env.goal[r, c]:
            return seen[(r, c)]
        for dr, dc in env.MOVES:
            nxt = (r + dr, c + dc)
            if nxt not in seen and passable(*nxt):
                seen[nxt] = seen[(r, c)] + 1
                queue.append(nxt)
    return None


class TestChainWorld:
    def test_reset_encodes_start(self):
        obs = ChainWorld(length=10).reset(0)
        assert obs.shape == (1, 10, 1)
        assert obs[0, 0, 0] == 1 and obs.sum() == 1

    def test_always_right_reaches_goal_in_nine_steps(self):
        env = ChainWorld(length=10)
        env.reset(0)
        total, steps, done = 0.0, 0, False
        while not done:
            res = env.step(ChainWorld.RIGHT)
            total += res.reward
            steps += 1
            done = res.done
        assert (total, steps) == (10.0, 9)
        assert res.info["outcome"] == "goal"

    def test_left_ends_with_small_reward(self):
        env = ChainWorld()
        env.reset()
        res = env.step(ChainWorld.LEFT)
        assert res.done and res.reward == 0.1

    def test_invalid_action(self):
        env = ChainWorld()
        env.reset()
        for bad in (2, -1, 0.5):
            with pytest.raises(DomainError):
                env.step(bad)

    def test_step_requires_reset(self):
        env = ChainWorld()
        with pytest.raises(RuntimeError):
            env.step(1)
        env.reset()
        env.step(0)
        with pytest.raises(RuntimeError):
            env.step(1)

    def test_truncation(self):
        env = ChainWorld(length=50, max_episode_steps=5)
        env.reset()
        results = [env.step(1) for _ in range(5)]
        assert results[-1].done and results[-1].info["truncated"]
        assert not any(r.done for r in results[:-1])


class TestTrapMaze:
    def test_observation_channels(self):
        env = TrapMaze()
        obs = env.reset(3)
        assert obs.shape == (10, 10, 4)
        assert set(np.unique(obs)) <= {0.0, 1.0}
        assert obs[..., TrapMaze.AGENT].sum() == 1

    def test_reset_is_seeded(self):
        a, b = TrapMaze(), TrapMaze()
        np.testing.assert_array_equal(a.reset(5), b.reset(5))

    def test_hidden_shortcut_shortens_the_path(self):
        env = TrapMaze()
        start = env.starts[0]
        with_shortcut = shortest_path(env, start, env.passable)
        without = shortest_path(env, start, lambda r, c: not env.walls[r, c])
        assert with_shortcut is not None and without is not None
        assert with_shortcut < without

    def test_trap_rate_monte_carlo(self):
        env = TrapMaze(p_trap=0.5)
        env.reset(0)
        trap = tuple(np.argwhere(env.traps)[0])
        rewards = []
        for _ in range(10_000):
            # step onto the trap from a free neighbour each time
            for k, (dr, dc) in enumerate(env.MOVES):
                src = (trap[0] - dr, trap[1] - dc)
                if env.passable(*src) and not env.traps[src] and not env.goal[src]:
                    break
            env.reset()  # unseeded: the trap stream keeps advancing
            env.pos = src
            rewards.append(env.step(k).reward)
        assert abs(np.mean(rewards) + 0.5) <= 0.02

    def test_deterministic_without_traps(self):
        actions = np.random.default_rng(0).integers(0, 4, size=60)

        def rollout():
            env = TrapMaze(p_trap=0.0)
            env.reset(1)
            out = []
            for a in actions:
                res = env.step(int(a))
                out.append((res.reward, env.pos))
                if res.done:
                    break
            return out

        assert rollout() == rollout()

    def test_same_seed_same_trajectory(self):
        actions = np.random.default_rng(2).integers(0, 4, size=100)

        def rollout():
            env = TrapMaze(p_trap=0.5)
            obs = [env.reset(9)]
            for a in actions:
                res = env.step(int(a))
                obs.append(res.observation)
                if res.done:
                    break
            return np.array(obs)

        np.testing.assert_array_equal(rollout(), rollout())

    def test_bad_probability(self):
        with pytest.raises(DomainError):
            TrapMaze(p_trap=1.5)


class TestFactory:
    def test_make_env(self):
        assert isinstance(make_env("ChainWorld", length=4), ChainWorld)
        assert isinstance(make_env("trapmaze"), TrapMaze)
        with pytest.raises(DomainError):
            make_env("pong")

    def test_trajectory_dump(self, tmp_path):
        env = ChainWorld(length=3)
        obs = env.reset()
        path = tmp_path / "traj.jsonl"
        dump_trajectory(path, [{"obs": obs, "reward": 0.0}, {"obs": obs, "reward": 1.0}])
        lines = path.read_text().splitlines()
        assert len(lines) == 2 and '"reward": 1.0' in lines[1]
