"""The CEQR-DQN agent: Thompson-sampled action choice over evidential uncertainty,
distributional Bellman targets, uniform experience replay and hard target syncs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import losses
from .envs import Env, EnvSpec
from .evidential import DomainError, NIGQuantileSet, action_uncertainties
from .losses import LossWeights
from .nnet import AdamState, QNetwork, adam_step, no_grad


class BufferNotReadyError(RuntimeError):
    pass


class DecisionError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    num_quantiles: int = 50
    gamma_discount: float = 0.99
    lambda_ep: float = 0.01
    lambda_al: float = 0.0
    batch_size: int = 32
    target_sync_period: int = 1000
    buffer_capacity: int = 100_000
    replay_start: int = 5000
    update_frequency: int = 1
    learning_rate: float = 1e-4
    adam_epsilon: float = 1e-8
    optimize: str = "joint"  # or "alternating": L_Z and L_EL on alternate steps
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.num_quantiles < 2:
            raise DomainError("num_quantiles must be > 1")
        if not 0 <= self.gamma_discount <= 1:
            raise DomainError("gamma_discount must be in [0, 1]")
        if self.lambda_ep < 0:
            raise DomainError("lambda_ep must be >= 0")
        if self.lambda_al < 0:
            raise DomainError("lambda_al must be >= 0")
        for name in ("batch_size", "target_sync_period", "buffer_capacity", "update_frequency"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if not 0 < self.replay_start <= self.buffer_capacity:
            raise DomainError("replay_start must be in (0, buffer_capacity]")
        if self.batch_size > self.replay_start:
            raise DomainError("batch_size must not exceed replay_start")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise DomainError("learning_rate and adam_epsilon must be positive")
        if self.optimize not in ("joint", "alternating"):
            raise DomainError("optimize must be 'joint' or 'alternating'")


class Transition(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_shape: tuple, start_threshold: int,
                 rng: np.random.Generator | int = 0):
        self.capacity = capacity
        self.start_threshold = start_threshold
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.states = np.zeros((capacity, *obs_shape))
        self.next_states = np.zeros((capacity, *obs_shape))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0  # next write slot
        self.pushed = 0

    def __len__(self):
        return self.size

    @property
    def ready(self) -> bool:
        return self.size >= self.start_threshold

    def push(self, t: Transition):
        i = self.head
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.dones[i] = t.done
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def _get(self, i: int) -> Transition:
        return Transition(self.states[i], int(self.actions[i]), float(self.rewards[i]),
                          self.next_states[i], bool(self.dones[i]))

    def transitions(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.head if self.size == self.capacity else 0
        return [self._get((start + k) % self.capacity) for k in range(self.size)]

    def sample(self, batch_size: int):
        if not self.ready:
            raise BufferNotReadyError(
                f"replay buffer holds {self.size} transitions; training starts at {self.start_threshold}"
            )
        idx = self.rng.integers(0, self.size, size=batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.dones[idx])


# ---------------------------------------------------------------------------
# Action selection


class ActionChoice(NamedTuple):
    action: int
    means: np.ndarray
    psi_ep: np.ndarray
    psi_al: np.ndarray
    greedy: bool


def thompson_choice(quantiles: np.ndarray, nig: NIGQuantileSet, lambda_ep: float, lambda_al: float,
                    rng: np.random.Generator) -> ActionChoice:
    """Sample S ~ N(M, diag(lambda_ep * psi_ep)) with M = means - lambda_al * psi_al; act on argmax S."""
    quantiles = np.asarray(quantiles, dtype=np.float64)
    arrays = (quantiles, nig.gamma, nig.v, nig.alpha, nig.beta)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        bad = [n for n, a in zip(("quantiles", "gamma", "v", "alpha", "beta"), arrays)
               if not np.all(np.isfinite(a))]
        raise DecisionError(f"non-finite network outputs in {', '.join(bad)}")
    means = quantiles.mean(axis=-1)
    psi_ep, psi_al = action_uncertainties(nig)
    m = means - lambda_al * psi_al if lambda_al > 0 else means
    z = rng.standard_normal(len(means))
    sample = m + np.sqrt(lambda_ep * psi_ep) * z
    action = int(np.argmax(sample))
    return ActionChoice(action, means, psi_ep, psi_al, action == int(np.argmax(means)))


def select_action(net: QNetwork, state, cfg: AgentConfig, rng: np.random.Generator,
                  return_info: bool = False):
    with no_grad():
        out = net(state)
    nig = NIGQuantileSet.from_tensors(out.nig)
    choice = thompson_choice(out.quantiles.data, nig, cfg.lambda_ep, cfg.lambda_al, rng)
    return choice if return_info else choice.action


def bellman_target(target_net: QNetwork, reward, next_state, done, gamma_discount: float) -> np.ndarray:
    """Distributional TD target r + gamma * Z(x', a*), a* = argmax of the mean quantile.

    Works on a single transition ([N] result) or a batch ([B, N]). No gradient.
    """
    with no_grad():
        q = target_net.action_quantiles(next_state).data
    batched = q.ndim == 3
    if not batched:
        q = q[None]
    best = q.mean(axis=-1).argmax(axis=-1)
    nxt = q[np.arange(q.shape[0]), best]
    reward = np.atleast_1d(np.asarray(reward, dtype=np.float64))[:, None]
    notdone = 1.0 - np.atleast_1d(np.asarray(done, dtype=np.float64))[:, None]
    target = reward + gamma_discount * notdone * nxt
    # done rows are exactly the reward, not reward + 0 * (possibly non-finite) quantiles
    target = np.where(notdone > 0, target, np.broadcast_to(reward, target.shape))
    return target if batched else target[0]


# ---------------------------------------------------------------------------
# Training


METRIC_FIELDS = ("step", "episode", "return", "L_qr", "L_cal_Z", "L_nll", "L_reg", "L_cal_EL",
                 "L_interval", "mean_psi_ep", "mean_psi_al", "greedy_agreement")
LOSS_KEYS = METRIC_FIELDS[3:9]


@dataclass
class MetricsRecord:
    step: int
    episode: int
    ret: float
    L_qr: float = math.nan
    L_cal_Z: float = math.nan
    L_nll: float = math.nan
    L_reg: float = math.nan
    L_cal_EL: float = math.nan
    L_interval: float = math.nan
    mean_psi_ep: float = math.nan
    mean_psi_al: float = math.nan
    greedy_agreement: float = math.nan

    def row(self) -> list[str]:
        vals = [getattr(self, f.name) for f in fields(self)]
        return [repr(v) if isinstance(v, float) else str(v) for v in vals]


class MetricsWriter:
    """Streams MetricsRecord rows to CSV (header: METRIC_FIELDS)."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(METRIC_FIELDS)

    def write(self, rec: MetricsRecord):
        self.writer.writerow(rec.row())

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class EpisodeResult:
    ret: float
    length: int
    reached_goal: bool
    psi_ep: list = field(default_factory=list)
    psi_al: list = field(default_factory=list)
    greedy: list = field(default_factory=list)
    losses: list = field(default_factory=list)


class CEQRAgent:
    """Bundles online/target networks, optimizer state, replay buffer and RNG streams."""

    def __init__(self, spec: EnvSpec, cfg: AgentConfig = AgentConfig(), seed: int = 0):
        self.spec = spec
        self.cfg = cfg
        self.seed = seed
        init_ss, act_ss, buf_ss = np.random.SeedSequence(seed).spawn(3)
        self.net = QNetwork(spec.height, spec.width, spec.channels, spec.num_actions, cfg.num_quantiles,
                            seed=np.random.default_rng(init_ss))
        self.target_net = self.net.clone()
        self.adam = AdamState(learning_rate=cfg.learning_rate, epsilon=cfg.adam_epsilon)
        self.rng = np.random.default_rng(act_ss)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, spec.obs_shape, cfg.replay_start,
                                   np.random.default_rng(buf_ss))
        self.levels = losses.midpoint_levels(cfg.num_quantiles)
        self.env_steps = 0
        self.opt_steps = 0
        self.episodes = 0

    # -- decisions ------------------------------------------------------
    def act(self, state) -> ActionChoice:
        return select_action(self.net, state, self.cfg, self.rng, return_info=True)

    def sync_target(self):
        self.target_net.copy_from(self.net)

    # -- learning -------------------------------------------------------
    def loss_parts(self, states, actions, rewards, next_states, dones):
        cfg = self.cfg
        target = bellman_target(self.target_net, rewards, next_states, dones, cfg.gamma_discount)
        theta, taken = self.net.taken(states, actions)
        parts = losses.z_loss_components(theta, target, cfg.weights, self.levels)
        parts.update(losses.el_loss_components(taken, target, cfg.weights))
        return parts, target

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        batch = self.buffer.sample(cfg.batch_size)
        parts, _ = self.loss_parts(*batch)
        l_z = losses.combine_z(parts)
        l_el = losses.combine_el(parts, cfg.weights)
        if cfg.optimize == "joint":
            total = l_z + l_el
        else:
            total = l_z if self.opt_steps % 2 == 0 else l_el
        self.net.zero_grad()
        total.backward()
        adam_step(self.net.params, None, self.adam)
        self.opt_steps += 1
        if self.opt_steps % cfg.target_sync_period == 0:
            self.sync_target()
        record = {k: float(parts[k]) for k in LOSS_KEYS}
        if not all(math.isfinite(v) for v in record.values()):
            raise FloatingPointError(f"non-finite loss at optimization step {self.opt_steps}: {record}")
        return record

    def run_episode(self, env: Env, mode: str = "train", seed: int | None = None,
                    frame_budget: int | None = None) -> EpisodeResult:
        """Play one episode. Train mode stores transitions and optimizes once every
        ``update_frequency`` env steps after warm-up; eval mode does neither."""
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        train = mode == "train"
        state = env.reset(seed)
        res = EpisodeResult(0.0, 0, False)
        done = False
        while not done:
            if train and frame_budget is not None and self.env_steps >= frame_budget:
                break
            choice = self.act(state)
            step = env.step(choice.action)
            res.ret += step.reward
            res.length += 1
            res.psi_ep.append(float(choice.psi_ep.mean()))
            res.psi_al.append(float(choice.psi_al.mean()))
            res.greedy.append(choice.greedy)
            done = step.done
            if step.info.get("outcome") == "goal" or (done and step.reward >= getattr(env, "goal_reward", math.inf)):
                res.reached_goal = True
            if train:
                terminal = done and not step.info.get("truncated", False)
                self.buffer.push(Transition(state, choice.action, step.reward, step.observation, terminal))
                self.env_steps += 1
                if self.buffer.ready and self.env_steps % self.cfg.update_frequency == 0:
                    res.losses.append(self.train_step())
            state = step.observation
        if train:
            self.episodes += 1
        return res

    def record(self, res: EpisodeResult, episode: int | None = None) -> MetricsRecord:
        rec = MetricsRecord(self.env_steps, self.episodes if episode is None else episode, float(res.ret))
        for k in LOSS_KEYS:
            vals = [d[k] for d in res.losses]
            setattr(rec, k, float(np.mean(vals)) if vals else math.nan)
        if res.length:
            rec.mean_psi_ep = float(np.mean(res.psi_ep))
            rec.mean_psi_al = float(np.mean(res.psi_al))
            rec.greedy_agreement = float(np.mean(res.greedy))
        return rec

    def train(self, env: Env, frames: int, writer: MetricsWriter | None = None,
              env_seed: int | None = None) -> list[MetricsRecord]:
        """Train for ``frames`` environment steps. The env is seeded once, then continues its stream."""
        records = []
        first = True
        while self.env_steps < frames:
            res = self.run_episode(env, "train", seed=env_seed if first else None, frame_budget=frames)
            first = False
            rec = self.record(res)
            records.append(rec)
            if writer is not None:
                writer.write(rec)
        return records

    def evaluate(self, env: Env, episodes: int, seed: int | None = None) -> list[EpisodeResult]:
        results = []
        for k in range(episodes):
            results.append(self.run_episode(env, "eval", seed=seed if k == 0 else None))
        return results


def config_dict(cfg: AgentConfig) -> dict:
    d = asdict(cfg)
    return d
