"""Training loop: episode collection, replay, the TD objective with target
networks, exercise moves, and the episode-reward-difference update of the
hierarchy policy.

The hierarchy latent is never stored; transitions carry the standard-normal
draw it was built from, and z is recomputed from the current (or target)
hierarchy parameters wherever it is consumed. That keeps the TD gradient
path into the hierarchy net alive on replayed data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import grad
from .agents import EpsSchedule, UtilityNet, eps_at, select_action
from .envs import make_env
from .grad import NonFiniteGradient, ParamStore, RmspropState, Tape, constant
from .mixer import HierarchyNet, make_mixer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    obs: list
    last_actions: tuple
    actions: tuple
    reward: float
    s_next: np.ndarray
    obs_next: list
    eps_noise: np.ndarray
    eps_noise_next: np.ndarray
    done: bool


@dataclass
class TrainerConfig:
    """Every knob of the training procedure, with paper-default values."""

    env_name: str
    mixer_name: str
    seed: int
    total_env_steps: int
    lr: float = 5e-4
    meta_lr: float = 1e-4
    rmsprop_alpha: float = 0.99
    gamma: float = 0.99
    batch_episodes: int = 32
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 10_000
    meta_interval: int = 500
    exercise_moves: int = 4
    target_update_interval: int = 200
    hierarchy_k: int = 3
    eval_interval: int = 1000
    eval_episodes: int = 24
    buffer_capacity: int = 5000
    d0_episodes: Optional[int] = None
    utility_hidden: int = 64
    mixer_embed: int = 32
    hypernet_embed: int = 64
    decode_dim: int = 16
    hierarchy_hidden: int = 64
    utility_activation: str = "relu"
    mixer_activation: str = "elu"

    def __post_init__(self):
        if self.d0_episodes is None:
            # one-step matrix episodes need a bigger batch for a usable
            # meta-reward signal
            self.d0_episodes = 32 if self.env_name == "matrix3" else 8
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        for name in ("lr", "meta_lr", "rmsprop_alpha", "batch_episodes",
                     "meta_interval", "target_update_interval", "hierarchy_k",
                     "eval_interval", "eval_episodes", "buffer_capacity",
                     "d0_episodes", "utility_hidden", "mixer_embed",
                     "hypernet_embed", "decode_dim", "eps_anneal_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.exercise_moves < 0 or self.total_env_steps < 0:
            raise ValueError("exercise_moves and total_env_steps must be >= 0")

    @property
    def eps_schedule(self) -> EpsSchedule:
        return EpsSchedule(self.eps_start, self.eps_end, self.eps_anneal_steps)


@dataclass
class RngStreams:
    """Independent per-purpose generators so ablations share randomness."""
    env: np.random.Generator
    explore: np.random.Generator
    noise: np.random.Generator
    init: np.random.Generator
    sample: np.random.Generator


def rng_streams(seed: int) -> RngStreams:
    def mk(offset: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(offset,)))
    return RngStreams(env=mk(0), explore=mk(1), noise=mk(2), init=mk(3), sample=mk(4))


class ReplayBuffer:
    """Ring buffer of complete episodes with seeded uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._rng = rng
        self._episodes: list = []
        self._cursor = 0
        self.episodes_added = 0

    def __len__(self) -> int:
        return len(self._episodes)

    def add(self, episode: list) -> None:
        if not episode or not episode[-1].done:
            raise ValueError("only complete episodes may be stored")
        if len(self._episodes) < self.capacity:
            self._episodes.append(episode)
        else:
            self._episodes[self._cursor] = episode
            self._cursor = (self._cursor + 1) % self.capacity
        self.episodes_added += 1

    def add_all(self, episodes) -> None:
        for e in episodes:
            self.add(e)

    def sample(self, n: int) -> list:
        if n > len(self._episodes):
            raise ValueError(f"cannot sample {n} episodes from {len(self._episodes)}")
        idx = self._rng.choice(len(self._episodes), size=n, replace=False)
        return [self._episodes[i] for i in idx]


class Networks:
    """Live (or frozen target) parameter bundle: utility phi, mixer zeta,
    optional hierarchy theta."""

    def __init__(self, utility: UtilityNet, mixer, hierarchy: HierarchyNet | None):
        self.utility = utility
        self.mixer = mixer
        self.hierarchy = hierarchy

    def clone(self) -> "Networks":
        return Networks(self.utility.clone(), self.mixer.clone(),
                        self.hierarchy.clone() if self.hierarchy else None)

    def sync_from(self, other: "Networks") -> None:
        self.utility.store.copy_from(other.utility.store)
        self.mixer.store.copy_from(other.mixer.store)
        if self.hierarchy is not None:
            self.hierarchy.store.copy_from(other.hierarchy.store)

    def stores(self) -> list[ParamStore]:
        out = [self.utility.store, self.mixer.store]
        if self.hierarchy is not None:
            out.append(self.hierarchy.store)
        return out

    def zero_grads(self) -> None:
        for s in self.stores():
            s.zero_grads()


def build_networks(cfg: TrainerConfig, env, rng: np.random.Generator) -> Networks:
    utility = UtilityNet(env.obs_dim, env.action_count, env.n_agents,
                         hidden=cfg.utility_hidden, act=cfg.utility_activation,
                         rng=rng)
    mixer = make_mixer(cfg.mixer_name, env.n_agents, env.state_dim,
                       k=cfg.hierarchy_k, embed=cfg.mixer_embed,
                       hypernet_embed=cfg.hypernet_embed,
                       decode_dim=cfg.decode_dim, act=cfg.mixer_activation,
                       rng=rng)
    hierarchy = None
    if mixer.has_hierarchy:
        hierarchy = HierarchyNet(env.state_dim, k=cfg.hierarchy_k,
                                 hidden=cfg.hierarchy_hidden,
                                 act=cfg.mixer_activation, rng=rng)
    return Networks(utility, mixer, hierarchy)


@dataclass
class Optimizers:
    phi: RmspropState
    zeta: RmspropState
    theta: RmspropState | None


def build_optimizers(nets: Networks, cfg: TrainerConfig) -> Optimizers:
    return Optimizers(
        phi=RmspropState(nets.utility.store, cfg.lr, cfg.rmsprop_alpha),
        zeta=RmspropState(nets.mixer.store, cfg.lr, cfg.rmsprop_alpha),
        theta=(RmspropState(nets.hierarchy.store, cfg.lr, cfg.rmsprop_alpha)
               if nets.hierarchy else None),
    )


# ---------------------------------------------------------------------------
# episode collection


def collect_episode(env, nets: Networks, eps: float,
                    explore_rng: np.random.Generator,
                    noise_rng: np.random.Generator, k: int):
    """Roll out one decentralized epsilon-greedy episode.

    Returns (transitions, undiscounted return, win flag). Hierarchy noise
    for z_t and z_{t+1} is drawn here and stored on each transition.
    """
    state, obs = env.reset()
    last = [-1] * env.n_agents
    noise = noise_rng.standard_normal(k)
    episode: list[Transition] = []
    total = 0.0
    win = False
    done = False
    while not done:
        actions = []
        for i in range(env.n_agents):
            q = nets.utility.q_values(obs[i], last[i], i).value[0]
            actions.append(select_action(q, eps, explore_rng))
        res = env.step(actions)
        nxt_noise = noise_rng.standard_normal(k)
        episode.append(Transition(
            s=state, obs=obs, last_actions=tuple(last), actions=tuple(actions),
            reward=res.reward, s_next=res.next_state, obs_next=res.next_obs,
            eps_noise=noise, eps_noise_next=nxt_noise, done=res.done))
        total += res.reward
        win = win or res.win
        state, obs = res.next_state, res.next_obs
        last = list(actions)
        noise = nxt_noise
        done = res.done
    return episode, total, win


# ---------------------------------------------------------------------------
# TD loss


def _utility_inputs(util: UtilityNet, obs_rows, last_actions, agent_id: int):
    t = len(obs_rows)
    x = np.zeros((t, util.input_dim))
    x[:, :util.obs_dim] = np.asarray(obs_rows, dtype=np.float64)
    la = np.asarray(last_actions, dtype=np.intp)
    rows = np.nonzero(la >= 0)[0]
    x[rows, util.obs_dim + la[rows]] = 1.0
    x[:, util.obs_dim + util.action_count + agent_id] = 1.0
    return x


class _Batch:
    """Flattened transition arrays for one TD pass."""

    def __init__(self, episodes, util: UtilityNet):
        trs = [tr for ep in episodes for tr in ep]
        n = util.n_agents
        self.size = len(trs)
        self.s = np.asarray([tr.s for tr in trs])
        self.s_next = np.asarray([tr.s_next for tr in trs])
        self.r = np.asarray([[tr.reward] for tr in trs])
        self.done = np.asarray([[1.0 if tr.done else 0.0] for tr in trs])
        self.eps_noise = np.asarray([tr.eps_noise for tr in trs])
        self.eps_noise_next = np.asarray([tr.eps_noise_next for tr in trs])
        self.actions = [np.asarray([tr.actions[i] for tr in trs]) for i in range(n)]
        self.live_inputs = [
            _utility_inputs(util, [tr.obs[i] for tr in trs],
                            [tr.last_actions[i] for tr in trs], i)
            for i in range(n)
        ]
        # at t+1 the just-taken action is the last action
        self.next_inputs = [
            _utility_inputs(util, [tr.obs_next[i] for tr in trs],
                            [tr.actions[i] for tr in trs], i)
            for i in range(n)
        ]


def td_targets(batch: _Batch, targets: Networks, cfg: TrainerConfig) -> np.ndarray:
    """Bootstrapped targets r + gamma * max_a' Qtot' (0 past terminal steps).

    The max is realized as per-agent argmax over the target utility nets,
    then mixed — exactly what argmax consistency licenses for monotone
    mixers.
    """
    n = targets.utility.n_agents
    rows = np.arange(batch.size)
    chosen = np.empty((batch.size, n))
    for i in range(n):
        tq = targets.utility.q_batch(batch.next_inputs[i], None).value
        chosen[:, i] = tq[rows, tq.argmax(axis=1)]
    z_next = None
    if targets.mixer.has_hierarchy:
        z_next = targets.hierarchy.forward_nodes(
            batch.s_next, batch.eps_noise_next, None)[2].value
    qtot_next = targets.mixer.mix(None, constant(chosen), batch.s_next, z_next).value
    return batch.r + cfg.gamma * (1.0 - batch.done) * qtot_next


def td_loss(episodes, nets: Networks, targets: Networks, cfg: TrainerConfig,
            force_detach_z: bool = False):
    """Mean squared TD error over every timestep of a batch of episodes.

    Returns (loss_node, tape). z_t is recomputed from stored noise with the
    live hierarchy net (reparameterized) so gradients reach theta unless the
    mixer blocks them or force_detach_z is set.
    """
    if not episodes:
        raise ValueError("empty batch")
    batch = _Batch(episodes, nets.utility)
    y = td_targets(batch, targets, cfg)

    tape = Tape()
    chosen = []
    for i in range(nets.utility.n_agents):
        qi = nets.utility.q_batch(batch.live_inputs[i], tape)
        chosen.append(grad.take_per_row(tape, qi, batch.actions[i]))
    qcat = grad.concat(tape, chosen)
    z = None
    if nets.mixer.has_hierarchy:
        if force_detach_z:
            z = nets.hierarchy.forward_nodes(batch.s, batch.eps_noise, None)[2].value
        else:
            z = nets.hierarchy.forward_nodes(batch.s, batch.eps_noise, tape)[2]
    qtot = nets.mixer.mix(tape, qcat, batch.s, z)
    err = grad.sub(tape, qtot, constant(y))
    loss = grad.mean_all(tape, grad.mul(tape, err, err))
    return loss, tape


def ql_step(episodes, nets: Networks, targets: Networks, opt: Optimizers,
            cfg: TrainerConfig, update_theta: bool = True,
            force_detach_z: bool = False) -> float:
    """One Q-learning update of phi and zeta (and theta via the z path
    unless frozen or blocked). Grads are zeroed on completion."""
    nets.zero_grads()
    loss, tape = td_loss(episodes, nets, targets, cfg,
                         force_detach_z=force_detach_z or not update_theta)
    value = float(loss.value[0, 0])
    if not np.isfinite(value):
        raise NonFiniteGradient(f"TD loss is not finite: {value}")
    tape.backward(loss, 1.0)
    grad.rmsprop_step(nets.utility.store, opt.phi)
    if len(nets.mixer.store):
        grad.rmsprop_step(nets.mixer.store, opt.zeta)
    if nets.hierarchy is not None:
        if update_theta:
            grad.rmsprop_step(nets.hierarchy.store, opt.theta)
        else:
            nets.hierarchy.store.zero_grads()
    return value


def exercise_move(d0, nets: Networks, targets: Networks, opt: Optimizers,
                  cfg: TrainerConfig) -> None:
    """A few Q-learning updates on freshly collected data, hierarchy frozen."""
    if not d0:
        raise ValueError("exercise_move needs collected episodes")
    for _ in range(cfg.exercise_moves):
        ql_step(d0, nets, targets, opt, cfg, update_theta=False,
                force_detach_z=True)


def meta_reward(r1: float, r0: float) -> float:
    """Episode-return improvement after exercise moves."""
    return r1 - r0


def meta_update(hierarchy: HierarchyNet, d0, reward: float,
                meta_lr: float) -> dict | None:
    """One plain ascent step on the hierarchy parameters:

        theta += meta_lr * reward * sum_t grad_theta log p(z_t | s_t)

    with z_t rebuilt from the stored noise under the pre-update parameters.
    Returns the applied update per parameter, or None if nothing was applied
    (zero reward is an exact no-op; non-finite gradients skip with a warning).
    """
    if reward == 0.0:
        return None
    trs = [tr for ep in d0 for tr in ep]
    s = np.asarray([tr.s for tr in trs])
    noise = np.asarray([tr.eps_noise for tr in trs])
    z = hierarchy.forward_nodes(s, noise, None)[2].value

    store = hierarchy.store
    store.zero_grads()
    tape = Tape()
    logp = hierarchy.logpdf(s, z, tape)
    total = grad.sum_all(tape, logp)
    tape.backward(total, 1.0)
    if not store.grads_finite():
        logger.warning("meta update skipped: non-finite hierarchy gradient")
        store.zero_grads()
        return None
    applied = {}
    for name in store.names():
        delta = meta_lr * reward * store.grads(name)
        store.values(name)[...] += delta
        applied[name] = delta
    store.zero_grads()
    return applied


# ---------------------------------------------------------------------------
# evaluation


def evaluate(env, utility: UtilityNet, episodes: int):
    """Greedy decentralized rollouts; the mixer plays no part.

    Returns (mean_return, win_rate, visitation histogram over state
    indices). Draws no randomness and mutates no parameters.
    """
    returns = []
    wins = 0
    visitation: dict[int, int] = {}
    for _ in range(episodes):
        state, obs = env.reset()
        last = [-1] * env.n_agents
        done = False
        total = 0.0
        won = False
        while not done:
            idx = env.state_index(state)
            visitation[idx] = visitation.get(idx, 0) + 1
            actions = [
                select_action(utility.q_values(obs[i], last[i], i).value[0], 0.0, None)
                for i in range(env.n_agents)
            ]
            res = env.step(actions)
            total += res.reward
            won = won or res.win
            state, obs = res.next_state, res.next_obs
            last = list(actions)
            done = res.done
        returns.append(total)
        wins += won
    return float(np.mean(returns)), wins / episodes, visitation


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class MetricsRecord:
    env_steps: int
    train_steps: int
    eps: float
    td_loss: float
    meta_reward: float
    eval_mean_return: float
    eval_win_rate: float
    wallclock_s: float


@dataclass
class RunResult:
    config: TrainerConfig
    metrics: list = field(default_factory=list)
    visitation: list = field(default_factory=list)  # (env_steps, histogram)
    nets: Networks | None = None


def outer_loop(cfg: TrainerConfig) -> RunResult:
    """Full training run: collect, exercise, meta-update, replay-train,
    sync targets, evaluate on schedule. Deterministic given the config."""
    import time
    t0 = time.perf_counter()

    rngs = rng_streams(cfg.seed)
    env = make_env(cfg.env_name)
    nets = build_networks(cfg, env, rngs.init)
    targets = nets.clone()
    opt = build_optimizers(nets, cfg)
    buffer = ReplayBuffer(cfg.buffer_capacity, rngs.sample)
    schedule = cfg.eps_schedule
    result = RunResult(config=cfg, nets=nets)

    env_steps = 0
    train_steps = 0
    episodes_collected = 0
    last_meta = 0
    next_eval = 0
    last_loss = 0.0
    last_meta_reward = 0.0
    meta_capable = nets.hierarchy is not None

    def record_eval():
        mean_ret, win_rate, visitation = evaluate(env, nets.utility, cfg.eval_episodes)
        result.metrics.append(MetricsRecord(
            env_steps=env_steps, train_steps=train_steps,
            eps=eps_at(schedule, env_steps), td_loss=last_loss,
            meta_reward=last_meta_reward, eval_mean_return=mean_ret,
            eval_win_rate=win_rate, wallclock_s=time.perf_counter() - t0))
        result.visitation.append((env_steps, visitation))

    while env_steps < cfg.total_env_steps:
        if env_steps >= next_eval:
            record_eval()
            next_eval = env_steps - env_steps % cfg.eval_interval + cfg.eval_interval

        eps = eps_at(schedule, env_steps)
        if meta_capable and env_steps - last_meta >= cfg.meta_interval:
            d0, d1 = [], []
            r0s, r1s = [], []
            for _ in range(cfg.d0_episodes):
                ep, ret, _ = collect_episode(env, nets, eps, rngs.explore,
                                             rngs.noise, cfg.hierarchy_k)
                d0.append(ep)
                r0s.append(ret)
                env_steps += len(ep)
            exercise_move(d0, nets, targets, opt, cfg)
            for _ in range(cfg.d0_episodes):
                ep, ret, _ = collect_episode(env, nets, eps, rngs.explore,
                                             rngs.noise, cfg.hierarchy_k)
                d1.append(ep)
                r1s.append(ret)
                env_steps += len(ep)
            last_meta_reward = meta_reward(float(np.mean(r1s)), float(np.mean(r0s)))
            meta_update(nets.hierarchy, d0, last_meta_reward, cfg.meta_lr)
            buffer.add_all(d0)
            buffer.add_all(d1)
            episodes_collected += len(d0) + len(d1)
            last_meta = env_steps
        else:
            ep, _, _ = collect_episode(env, nets, eps, rngs.explore,
                                       rngs.noise, cfg.hierarchy_k)
            buffer.add(ep)
            episodes_collected += 1
            env_steps += len(ep)

        # keep cumulative training steps tracking cumulative episodes
        while train_steps < episodes_collected and len(buffer) >= cfg.batch_episodes:
            batch = buffer.sample(cfg.batch_episodes)
            last_loss = ql_step(batch, nets, targets, opt, cfg)
            train_steps += 1
            if train_steps % cfg.target_update_interval == 0:
                targets.sync_from(nets)

    if env_steps > 0:
        record_eval()
    return result
