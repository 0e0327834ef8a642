"""Cooperative multi-agent environments with full state, partial per-agent
observations, a shared reward, and exact brute-force optima.

Two desk-scale environments are provided: a one-shot 3x3 payoff-matrix game
whose optimum no monotonic factorization can represent, and a grid world
where all agents must stand on the goal cell simultaneously.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class EnvError(Exception):
    pass


@dataclass(frozen=True)
class StepResult:
    reward: float
    next_state: np.ndarray
    next_obs: list
    done: bool
    win: bool = False


# The classic nonmonotonic pathology: the 8 in the corner cannot be reached
# by any factorization with nonnegative mixing weights fit to uniform play.
MATRIX_PAYOFF = np.array([
    [8.0, -12.0, -12.0],
    [-12.0, 0.0, 0.0],
    [-12.0, 0.0, 0.0],
])


class MatrixGame:
    """Two agents, three actions, one step, shared payoff."""

    n_agents = 2
    action_count = 3
    obs_dim = 1
    state_dim = 1
    max_episode_len = 1
    gamma = 0.99

    def __init__(self, payoff: np.ndarray = MATRIX_PAYOFF):
        self.payoff = np.asarray(payoff, dtype=np.float64)
        if self.payoff.shape != (self.action_count, self.action_count):
            raise EnvError(f"payoff must be {self.action_count}x{self.action_count}")
        self._done = True

    def reset(self, seed: Optional[int] = None):
        self._done = False
        state = self._state()
        return state, [self._obs(i) for i in range(self.n_agents)]

    def _state(self) -> np.ndarray:
        return np.ones(self.state_dim)

    def _obs(self, agent: int) -> np.ndarray:
        return np.ones(self.obs_dim)

    def step(self, joint_action) -> StepResult:
        if self._done:
            raise EnvError("step() after episode end; call reset()")
        a = list(joint_action)
        if len(a) != self.n_agents:
            raise EnvError(f"expected {self.n_agents} actions, got {len(a)}")
        for act in a:
            if not 0 <= act < self.action_count:
                raise EnvError(f"action {act} out of range [0, {self.action_count})")
        reward = float(self.payoff[a[0], a[1]])
        self._done = True
        return StepResult(
            reward=reward,
            next_state=self._state(),
            next_obs=[self._obs(i) for i in range(self.n_agents)],
            done=True,
            win=reward == self.payoff.max(),
        )

    def optimal_return(self) -> float:
        return float(self.payoff.max())

    def n_states(self) -> int:
        return 1

    def state_index(self, state) -> int:
        return 0

    def state_of_index(self, index: int) -> np.ndarray:
        if index != 0:
            raise EnvError("matrix game has a single state")
        return self._state()


@dataclass(frozen=True)
class GridGatherSpec:
    width: int = 6
    height: int = 6
    starts: tuple = ((0, 0), (5, 5))
    goal: tuple = (2, 2)
    view_radius: int = 1
    step_penalty: float = -0.05
    capture_reward: float = 10.0
    max_episode_len: int = 30

    def __post_init__(self):
        cells = [self.goal, *self.starts]
        for x, y in cells:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise EnvError(f"position ({x},{y}) outside {self.width}x{self.height} grid")
        if self.max_episode_len < 1:
            raise EnvError("max_episode_len must be >= 1")
        if len(self.starts) < 2:
            raise EnvError("need at least 2 agents")


# action -> (dx, dy); off-grid moves keep the agent in place
GRID_MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))


class GridGather:
    """Agents must occupy the goal cell simultaneously to capture.

    Full state: per-agent position one-hots plus a timestep/horizon scalar.
    Observation: the (2r+1)^2 window around the agent (out-of-grid cells
    masked to -1; in-grid cells encode other-agent count + 2*goal) plus the
    agent's own position one-hot.
    """

    gamma = 0.99

    def __init__(self, spec: GridGatherSpec = GridGatherSpec()):
        self.spec = spec
        self.n_agents = len(spec.starts)
        self.action_count = len(GRID_MOVES)
        self.n_cells = spec.width * spec.height
        side = 2 * spec.view_radius + 1
        self.obs_dim = side * side + self.n_cells
        self.state_dim = self.n_agents * self.n_cells + 1
        self.max_episode_len = spec.max_episode_len
        self._pos: list = []
        self._t = 0
        self._done = True

    def reset(self, seed: Optional[int] = None):
        self._pos = [tuple(p) for p in self.spec.starts]
        self._t = 0
        self._done = False
        return self._state(), [self._obs(i) for i in range(self.n_agents)]

    def _cell(self, x: int, y: int) -> int:
        return y * self.spec.width + x

    def _state(self) -> np.ndarray:
        s = np.zeros(self.state_dim)
        for i, (x, y) in enumerate(self._pos):
            s[i * self.n_cells + self._cell(x, y)] = 1.0
        s[-1] = self._t / self.max_episode_len
        return s

    def _obs(self, agent: int) -> np.ndarray:
        r = self.spec.view_radius
        side = 2 * r + 1
        window = np.empty(side * side)
        ax, ay = self._pos[agent]
        k = 0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                x, y = ax + dx, ay + dy
                if not (0 <= x < self.spec.width and 0 <= y < self.spec.height):
                    window[k] = -1.0
                else:
                    others = sum(1 for j, p in enumerate(self._pos)
                                 if j != agent and p == (x, y))
                    window[k] = others + 2.0 * ((x, y) == self.spec.goal)
                k += 1
        own = np.zeros(self.n_cells)
        own[self._cell(ax, ay)] = 1.0
        return np.concatenate([window, own])

    def _move(self, pos, action):
        dx, dy = GRID_MOVES[action]
        x, y = pos[0] + dx, pos[1] + dy
        if 0 <= x < self.spec.width and 0 <= y < self.spec.height:
            return (x, y)
        return tuple(pos)

    def step(self, joint_action) -> StepResult:
        if self._done:
            raise EnvError("step() after episode end; call reset()")
        a = list(joint_action)
        if len(a) != self.n_agents:
            raise EnvError(f"expected {self.n_agents} actions, got {len(a)}")
        for act in a:
            if not 0 <= act < self.action_count:
                raise EnvError(f"action {act} out of range [0, {self.action_count})")
        self._pos = [self._move(p, act) for p, act in zip(self._pos, a)]
        self._t += 1
        captured = all(p == self.spec.goal for p in self._pos)
        if captured:
            reward = self.spec.capture_reward
            self._done = True
        else:
            reward = self.spec.step_penalty
            self._done = self._t >= self.max_episode_len
        return StepResult(
            reward=float(reward),
            next_state=self._state(),
            next_obs=[self._obs(i) for i in range(self.n_agents)],
            done=self._done,
            win=captured,
        )

    # -- exhaustive oracle ---------------------------------------------------

    def n_states(self) -> int:
        return self.n_cells ** self.n_agents

    def state_index(self, state) -> int:
        """Positional encoding over agents (agent 0 most significant)."""
        state = np.asarray(state)
        idx = 0
        for i in range(self.n_agents):
            onehot = state[i * self.n_cells:(i + 1) * self.n_cells]
            cell = int(np.argmax(onehot))
            if onehot[cell] != 1.0:
                raise EnvError("state vector is not a valid position encoding")
            idx = idx * self.n_cells + cell
        return idx

    def state_of_index(self, index: int) -> np.ndarray:
        if not 0 <= index < self.n_states():
            raise EnvError(f"state index {index} out of range")
        cells = []
        rem = index
        for _ in range(self.n_agents):
            cells.append(rem % self.n_cells)
            rem //= self.n_cells
        cells.reverse()
        s = np.zeros(self.state_dim)
        for i, c in enumerate(cells):
            s[i * self.n_cells + c] = 1.0
        return s

    def optimal_return(self) -> float:
        """Exact optimal undiscounted episode return by joint value iteration."""
        n_joint = self.n_states()
        horizon = self.max_episode_len
        n_ja = self.action_count ** self.n_agents
        if n_joint * n_ja > 10_000_000:
            raise EnvError("joint state-action space too large for exact search")

        def decode(idx):
            cells = []
            rem = idx
            for _ in range(self.n_agents):
                cells.append(rem % self.n_cells)
                rem //= self.n_cells
            cells.reverse()
            return [(c % self.spec.width, c // self.spec.width) for c in cells]

        def encode(positions):
            idx = 0
            for (x, y) in positions:
                idx = idx * self.n_cells + self._cell(x, y)
            return idx

        goal_idx = encode([self.spec.goal] * self.n_agents)
        joint_actions = [[]]
        for _ in range(self.n_agents):
            joint_actions = [ja + [a] for ja in joint_actions
                             for a in range(self.action_count)]

        # successor table: next_idx[state, joint_action]
        nxt = np.empty((n_joint, n_ja), dtype=np.int64)
        for sidx in range(n_joint):
            pos = decode(sidx)
            for j, ja in enumerate(joint_actions):
                nxt[sidx, j] = encode([self._move(p, a) for p, a in zip(pos, ja)])

        capture = self.spec.capture_reward
        penalty = self.spec.step_penalty
        # V[t][s]: best return-to-go with (horizon - t) steps remaining
        v = np.zeros(n_joint)
        for t in range(horizon - 1, -1, -1):
            succ_v = np.where(nxt == goal_idx, capture, penalty + v[nxt])
            v = succ_v.max(axis=1)
        start = encode([tuple(p) for p in self.spec.starts])
        return float(v[start])


ENV_NAMES = ("matrix3", "grid_gather")


def make_env(name: str):
    if name == "matrix3":
        return MatrixGame()
    if name == "grid_gather":
        return GridGather()
    raise EnvError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")
