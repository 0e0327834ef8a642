"""Per-agent utility networks and the decentralized execution policy.

One 2-layer MLP is shared by all agents; an agent-id one-hot in the input
is the only thing that differentiates them. Action selection is epsilon-
greedy over the agent's own Q-values and sees nothing global.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad
from .grad import Node, ParamStore, Tape


@dataclass(frozen=True)
class EpsSchedule:
    start: float = 1.0
    end: float = 0.05
    anneal_steps: int = 10_000

    def __post_init__(self):
        if not self.start >= self.end >= 0.0:
            raise ValueError("need start >= end >= 0")
        if self.anneal_steps < 1:
            raise ValueError("anneal_steps must be positive")


def eps_at(schedule: EpsSchedule, env_step: int) -> float:
    """Piecewise-linear anneal: start -> end over anneal_steps, then flat."""
    if env_step < 0:
        raise ValueError("env_step must be >= 0")
    frac = min(1.0, env_step / schedule.anneal_steps)
    return schedule.start + (schedule.end - schedule.start) * frac


def select_action(q: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Greedy with probability 1-eps (ties -> lowest index), else uniform."""
    q = np.asarray(q).reshape(-1)
    if q.size == 0:
        raise ValueError("empty Q-vector")
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must be in [0,1], got {eps}")
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


class UtilityNet:
    """Shared action-value net Q_i(obs, last action, agent id) -> R^|A|."""

    def __init__(self, obs_dim: int, action_count: int, n_agents: int,
                 hidden: int = 64, act: str = "relu",
                 rng: np.random.Generator | None = None,
                 store: ParamStore | None = None):
        self.obs_dim = obs_dim
        self.action_count = action_count
        self.n_agents = n_agents
        self.input_dim = obs_dim + action_count + n_agents
        self.arch = [self.input_dim, hidden, action_count]
        self.act = act
        if store is None:
            store = ParamStore()
            grad.init_mlp(store, "utility", self.arch,
                          rng if rng is not None else np.random.default_rng(0))
        self.store = store

    def build_input(self, obs, last_action: int, agent_id: int) -> np.ndarray:
        """Assemble one input row. last_action < 0 encodes 'no action yet'."""
        if not 0 <= agent_id < self.n_agents:
            raise ValueError(f"agent_id {agent_id} out of range")
        x = np.zeros(self.input_dim)
        obs = np.asarray(obs, dtype=np.float64).reshape(-1)
        if obs.size != self.obs_dim:
            raise ValueError(f"obs has {obs.size} features, expected {self.obs_dim}")
        x[:self.obs_dim] = obs
        if last_action >= 0:
            if last_action >= self.action_count:
                raise ValueError(f"last_action {last_action} out of range")
            x[self.obs_dim + last_action] = 1.0
        x[self.obs_dim + self.action_count + agent_id] = 1.0
        return x

    def q_values(self, obs, last_action: int, agent_id: int,
                 tape: Tape | None = None) -> Node:
        """Q-vector for one agent at one timestep."""
        x = self.build_input(obs, last_action, agent_id)
        return grad.forward_mlp(self.store, "utility", x, self.arch, self.act, tape)

    def q_batch(self, inputs: np.ndarray, tape: Tape | None = None) -> Node:
        """Q-vectors for a stack of pre-built input rows, shape (B, input_dim)."""
        return grad.forward_mlp(self.store, "utility", inputs, self.arch, self.act, tape)

    def clone(self) -> "UtilityNet":
        return UtilityNet(self.obs_dim, self.action_count, self.n_agents,
                          hidden=self.arch[1], act=self.act, store=self.store.clone())
