import dataclasses
import math

import numpy as np
import pytest

from ceqrdqn.agent import (
    METRIC_FIELDS,
    AgentConfig,
    BufferNotReadyError,
    CEQRAgent,
    DecisionError,
    MetricsWriter,
    ReplayBuffer,
    Transition,
    bellman_target,
    thompson_choice,
)
from ceqrdqn.envs import ChainWorld
from ceqrdqn.evidential import DomainError, NIGQuantileSet
from ceqrdqn.nnet import QNetwork

SMALL = AgentConfig(num_quantiles=4, batch_size=4, replay_start=8, buffer_capacity=64, target_sync_period=5)


def nig_set(sd, gap=0.0, A=2, N=3):
    """NIG outputs with epistemic SD ``sd[a]`` and 5th-95th gap ``gap[a]`` per action."""
    shape = (A, 2, N)
    sd = np.broadcast_to(np.asarray(sd, dtype=float)[:, None, None], shape)
    gamma = np.zeros(shape)
    gamma[:, 1] = np.broadcast_to(np.broadcast_to(np.asarray(gap, dtype=float), (A,))[:, None], (A, N))
    return NIGQuantileSet(gamma, np.ones(shape), np.full(shape, 2.0), sd ** 2)


class TestConfig:
    def test_defaults_match_reference_hyperparameters(self):
        c = AgentConfig()
        assert (c.batch_size, c.num_quantiles, c.buffer_capacity, c.replay_start) == (32, 50, 100_000, 5000)
        assert (c.target_sync_period, c.gamma_discount, c.learning_rate, c.adam_epsilon) == (1000, 0.99, 1e-4, 1e-8)
        assert (c.update_frequency, c.weights.kappa, c.lambda_al) == (1, 1.0, 0.0)
        assert (c.weights.lambda_reg, c.weights.lambda_cal) == (0.5, 0.5)

    @pytest.mark.parametrize("field, bad", [("lambda_ep", -1.0), ("gamma_discount", 1.5), ("batch_size", 0),
                                            ("replay_start", 0), ("optimize", "both")])
    def test_invalid_fields(self, field, bad):
        with pytest.raises(DomainError, match=field.split("_")[0]):
            dataclasses.replace(AgentConfig(), **{field: bad})


class TestReplayBuffer:
    def push_n(self, buf, start, n):
        for k in range(start, start + n):
            buf.push(Transition(np.full((1, 2, 1), k), k % 2, float(k), np.zeros((1, 2, 1)), False))

    def test_fifo_eviction(self):
        buf = ReplayBuffer(5, (1, 2, 1), 1)
        self.push_n(buf, 0, 8)
        assert len(buf) == 5
        assert [t.reward for t in buf.transitions()] == [3.0, 4.0, 5.0, 6.0, 7.0]

    def test_start_threshold_gates_sampling(self):
        buf = ReplayBuffer(10, (1, 2, 1), 4)
        self.push_n(buf, 0, 3)
        assert not buf.ready
        with pytest.raises(BufferNotReadyError):
            buf.sample(2)
        self.push_n(buf, 3, 1)
        assert buf.ready
        states, actions, rewards, _, _ = buf.sample(16)
        assert set(rewards) <= {0.0, 1.0, 2.0, 3.0}
        np.testing.assert_array_equal(states[:, 0, 0, 0], rewards)

    def test_sampling_only_sees_live_entries(self):
        buf = ReplayBuffer(4, (1, 2, 1), 1, rng=3)
        self.push_n(buf, 0, 10)
        rewards = buf.sample(200)[2]
        assert set(rewards) == {6.0, 7.0, 8.0, 9.0}


class TestThompson:
    def test_zero_lambda_is_greedy(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            q = rng.normal(size=(4, 3))
            choice = thompson_choice(q, nig_set(np.ones(4), A=4), 0.0, 0.0, rng)
            assert choice.action == int(np.argmax(q.mean(axis=1))) and choice.greedy

    def test_symmetric_split(self):
        rng = np.random.default_rng(1)
        acts = [thompson_choice(np.zeros((2, 3)), nig_set([1.0, 1.0]), 1.0, 0.0, rng).action
                for _ in range(10_000)]
        assert abs(np.mean(acts) - 0.5) <= 0.02

    def test_risk_aversion_prefers_low_aleatoric(self):
        rng = np.random.default_rng(2)
        acts = [thompson_choice(np.zeros((2, 3)), nig_set([1.0, 1.0], gap=[0.0, 5.0]), 0.5, 1.0, rng).action
                for _ in range(2000)]
        assert np.mean(np.array(acts) == 0) > 0.6

    def test_non_finite_outputs_rejected(self):
        q = np.array([[np.nan, 0, 0], [0, 0, 0]])
        with pytest.raises(DecisionError, match="quantiles"):
            thompson_choice(q, nig_set([1.0, 1.0]), 0.1, 0.0, np.random.default_rng(0))


class TestBellmanTarget:
    def setup_method(self):
        self.net = QNetwork(1, 4, 1, 2, 5, seed=0)
        self.state = np.zeros((1, 4, 1))
        self.state[0, 1, 0] = 1

    def test_done_gives_reward(self):
        np.testing.assert_array_equal(bellman_target(self.net, 1.0, self.state, True, 0.99), np.ones(5))

    def test_zero_discount_gives_reward(self):
        np.testing.assert_array_equal(bellman_target(self.net, 2.5, self.state, False, 0.0), np.full(5, 2.5))

    def test_constant_next_quantiles(self):
        net = QNetwork(1, 4, 1, 2, 5, seed=0)
        for p in net.params.values():
            p.data[...] = 0.0
        net.params["action_head.bias"].data[...] = 1.0
        np.testing.assert_allclose(bellman_target(net, 0.0, self.state, False, 0.99), np.full(5, 0.99))

    def test_linear_in_next_quantiles(self):
        base = bellman_target(self.net, 0.3, self.state, False, 0.9)
        scaled = self.net.clone()
        for name in ("action_head.weight", "action_head.bias"):
            scaled.params[name].data *= 3.0
        np.testing.assert_allclose(bellman_target(scaled, 0.3, self.state, False, 0.9) - 0.3,
                                   3.0 * (base - 0.3), rtol=1e-12)

    def test_batched(self):
        states = np.stack([self.state, self.state])
        out = bellman_target(self.net, np.array([1.0, 2.0]), states, np.array([True, False]), 0.5)
        assert out.shape == (2, 5)
        np.testing.assert_array_equal(out[0], np.ones(5))
        np.testing.assert_allclose(out[1], bellman_target(self.net, 2.0, self.state, False, 0.5))


class TestAgent:
    def test_update_frequency_one(self):
        agent = CEQRAgent(ChainWorld(4).spec, SMALL, seed=0)
        agent.train(ChainWorld(4), 40, env_seed=0)
        assert agent.opt_steps == 40 - SMALL.replay_start + 1

    def test_target_sync_is_exact_copy(self):
        cfg = dataclasses.replace(SMALL, target_sync_period=1000)
        agent = CEQRAgent(ChainWorld(4).spec, cfg, seed=1)
        env = ChainWorld(4)
        agent.train(env, cfg.replay_start - 1 + 999, env_seed=0)
        assert agent.opt_steps == 999
        assert any(not np.array_equal(agent.net.params[k].data, agent.target_net.params[k].data)
                   for k in agent.net.params)
        agent.train(env, cfg.replay_start - 1 + 1000)
        assert agent.opt_steps == 1000
        for k in agent.net.params:
            np.testing.assert_array_equal(agent.net.params[k].data, agent.target_net.params[k].data)

    def test_target_frozen_between_syncs(self):
        agent = CEQRAgent(ChainWorld(4).spec, SMALL, seed=2)
        env = ChainWorld(4)
        agent.train(env, SMALL.replay_start - 1 + 5, env_seed=0)
        frozen = agent.target_net.state_dict()
        agent.train(env, SMALL.replay_start - 1 + 9)
        for k, v in frozen.items():
            np.testing.assert_array_equal(agent.target_net.params[k].data, v)

    def test_eval_leaves_buffer_alone(self):
        agent = CEQRAgent(ChainWorld(4).spec, SMALL, seed=0)
        agent.train(ChainWorld(4), 20, env_seed=0)
        size, steps = len(agent.buffer), agent.opt_steps
        agent.evaluate(ChainWorld(4), 5, seed=1)
        assert (len(agent.buffer), agent.opt_steps) == (size, steps)

    def test_alternating_mode_runs(self):
        cfg = dataclasses.replace(SMALL, optimize="alternating")
        agent = CEQRAgent(ChainWorld(4).spec, cfg, seed=0)
        recs = agent.train(ChainWorld(4), 30, env_seed=0)
        assert all(math.isfinite(r.ret) for r in recs)

    def test_default_config_losses_finite_for_1000_steps(self):
        cfg = AgentConfig()
        env = ChainWorld(10)
        agent = CEQRAgent(env.spec, cfg, seed=0)
        recs = agent.train(env, cfg.replay_start - 1 + 1000, env_seed=0)
        assert agent.opt_steps == 1000
        trained = [r for r in recs if not math.isnan(r.L_qr)]
        assert trained
        for r in trained:
            assert all(math.isfinite(getattr(r, k)) for k in ("L_qr", "L_cal_Z", "L_nll", "L_reg",
                                                                 "L_cal_EL", "L_interval"))

    def test_runs_are_reproducible(self, tmp_path):
        paths = []
        for k in range(2):
            agent = CEQRAgent(ChainWorld(4).spec, SMALL, seed=7)
            path = tmp_path / f"m{k}.csv"
            with MetricsWriter(path) as w:
                agent.train(ChainWorld(4), 60, w, env_seed=7)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert paths[0].read_text().splitlines()[0].split(",") == list(METRIC_FIELDS)
