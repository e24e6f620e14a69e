"""Grid environments with binary H x W x O observations (MinAtar convention).

``ChainWorld`` is a sparse-reward exploration test; ``TrapMaze`` mixes random
traps (aleatoric risk) with a hidden shortcut (epistemic payoff).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .evidential import DomainError


@dataclass(frozen=True)
class EnvSpec:
    height: int
    width: int
    channels: int
    num_actions: int
    max_episode_steps: int
    reward_range: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        for name in ("height", "width", "channels", "num_actions", "max_episode_steps"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


class Env:
    spec: EnvSpec

    def __init__(self):
        self.rng = np.random.default_rng(0)
        self.t = 0
        self._needs_reset = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Start an episode. A seed reseeds the env's own stream; None continues it."""
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self._needs_reset = False
        self._reset()
        return self.observe()

    def step(self, action: int) -> StepResult:
        if self._needs_reset:
            raise RuntimeError("step() called before reset() or after the episode ended")
        if not (isinstance(action, (int, np.integer)) and 0 <= action < self.spec.num_actions):
            raise DomainError(f"invalid action {action!r}; expected int in [0, {self.spec.num_actions})")
        reward, done, info = self._step(int(action))
        self.t += 1
        if not done and self.t >= self.spec.max_episode_steps:
            done = True
            info["truncated"] = True
        self._needs_reset = done
        return StepResult(self.observe(), float(reward), bool(done), info)

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def _reset(self):
        raise NotImplementedError

    def _step(self, action: int):
        raise NotImplementedError


class ChainWorld(Env):
    """A line of ``length`` cells; the agent starts at the left end.

    Action 0 (left) pays ``left_reward`` and ends the episode. Action 1 (right)
    moves one cell; arriving at the far end pays ``goal_reward`` and ends it.
    """

    LEFT, RIGHT = 0, 1

    def __init__(self, length: int = 10, left_reward: float = 0.1, goal_reward: float = 10.0,
                 max_episode_steps: int | None = None):
        super().__init__()
        if length < 2:
            raise DomainError("chain length must be >= 2")
        self.length = length
        self.left_reward = left_reward
        self.goal_reward = goal_reward
        self.spec = EnvSpec(1, length, 1, 2, max_episode_steps or 4 * length,
                            (0.0, max(left_reward, goal_reward)))
        self.pos = 0

    def _reset(self):
        self.pos = 0

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.spec.obs_shape)
        obs[0, self.pos, 0] = 1.0
        return obs

    def _step(self, action):
        if action == self.LEFT:
            return self.left_reward, True, {"position": self.pos, "outcome": "left"}
        self.pos += 1
        if self.pos == self.length - 1:
            return self.goal_reward, True, {"position": self.pos, "outcome": "goal"}
        return 0.0, False, {"position": self.pos}


# Default 10x10 layout. '#' wall, 'T' trap, 'G' goal, 'S' candidate start,
# 'H' hidden shortcut: drawn as a wall but passable.
TRAP_MAZE_LAYOUT = (
    "##########",
    "#SS#....G#",
    "#SS#.###.#",
    "#..#.#T..#",
    "#.T#.#.#.#",
    "#..H.#.#.#",
    "#.##.#.#T#",
    "#.T......#",
    "#..T.#...#",
    "##########",
)


class TrapMaze(Env):
    """10x10 maze, 4 actions (up, down, left, right), channels (agent, wall, trap, goal).

    Entering a trap cell yields -1 with probability ``p_trap``; reaching the goal
    yields +10 and ends the episode.
    """

    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
    AGENT, WALL, TRAP, GOAL = range(4)

    def __init__(self, p_trap: float = 0.25, layout=TRAP_MAZE_LAYOUT, goal_reward: float = 10.0,
                 trap_penalty: float = -1.0, max_episode_steps: int = 200):
        super().__init__()
        if not 0 <= p_trap <= 1:
            raise DomainError("p_trap must be in [0, 1]")
        self.p_trap = p_trap
        self.goal_reward = goal_reward
        self.trap_penalty = trap_penalty
        grid = np.array([list(row) for row in layout])
        h, w = grid.shape
        self.spec = EnvSpec(h, w, 4, 4, max_episode_steps, (trap_penalty, goal_reward))
        self.walls = (grid == "#") | (grid == "H")
        self.hidden = grid == "H"
        self.traps = grid == "T"
        self.goal = grid == "G"
        self.starts = [tuple(p) for p in np.argwhere(grid == "S")]
        self.base = np.zeros(self.spec.obs_shape)
        self.base[..., self.WALL] = self.walls
        self.base[..., self.TRAP] = self.traps
        self.base[..., self.GOAL] = self.goal
        self.pos = self.starts[0]

    def _reset(self):
        self.pos = self.starts[self.rng.integers(len(self.starts))]

    def observe(self) -> np.ndarray:
        obs = self.base.copy()
        obs[self.pos + (self.AGENT,)] = 1.0
        return obs

    def passable(self, r: int, c: int) -> bool:
        return not self.walls[r, c] or bool(self.hidden[r, c])

    def _step(self, action):
        dr, dc = self.MOVES[action]
        r, c = self.pos[0] + dr, self.pos[1] + dc
        if self.passable(r, c):
            self.pos = (r, c)
        info = {"position": self.pos}
        if self.goal[self.pos]:
            return self.goal_reward, True, info
        reward = 0.0
        if self.traps[self.pos]:
            # always draw so the stream advances identically whatever p_trap is
            sprung = self.rng.random() < self.p_trap
            info["trap"] = bool(sprung)
            if sprung:
                reward = self.trap_penalty
        return reward, False, info


def make_env(name: str, **params) -> Env:
    name = name.lower()
    if name == "chainworld":
        return ChainWorld(**params)
    if name == "trapmaze":
        return TrapMaze(**params)
    raise DomainError(f"unknown environment {name!r}; choose chainworld or trapmaze")


def dump_trajectory(path, records: list[dict]):
    """Write one JSON object per line (observations as nested lists)."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: (v.tolist() if isinstance(v, np.ndarray) else v)
                                 for k, v in rec.items()}) + "\n")
