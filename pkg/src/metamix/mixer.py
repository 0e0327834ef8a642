"""Centralized mixing networks: VDN, QMIX, and the hierarchy-conditioned
mixer with its state-conditioned Gaussian hierarchy policy.

All weight vectors applied to agent utilities pass through an elementwise
absolute value, so every mixer here is monotone in each agent's utility by
construction and therefore argmax-consistent with per-agent greedy action
selection.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import grad
from .grad import Node, ParamStore, Tape, constant

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class HierarchySample:
    """One draw of the hierarchy latent: z = mu + sigma * eps."""
    mu: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray
    z: np.ndarray


class HierarchyNet:
    """State-conditioned diagonal Gaussian over the K-dim hierarchy latent.

    An MLP maps the full state to (mu, rho); sigma = softplus(rho) + 1e-4
    keeps the density well-defined for any parameters.
    """

    def __init__(self, state_dim: int, k: int = 3, hidden: int = 64,
                 act: str = "elu", rng: np.random.Generator | None = None,
                 store: ParamStore | None = None):
        self.state_dim = state_dim
        self.k = k
        self.hidden = hidden
        self.act = act
        self.arch = [state_dim, hidden, 2 * k] if hidden > 0 else [state_dim, 2 * k]
        if store is None:
            store = ParamStore()
            grad.init_mlp(store, "hierarchy", self.arch,
                          rng if rng is not None else np.random.default_rng(0))
        self.store = store

    def _mu_sigma(self, s, tape: Tape | None):
        out = grad.forward_mlp(self.store, "hierarchy", s, self.arch, self.act, tape)
        mu = grad.slice_cols(tape, out, 0, self.k)
        rho = grad.slice_cols(tape, out, self.k, 2 * self.k)
        sigma = grad.add_const(tape, grad.softplus(tape, rho), SIGMA_FLOOR)
        return mu, sigma

    def forward_nodes(self, s, eps, tape: Tape | None):
        """(mu, sigma, z) as graph nodes; z = mu + sigma*eps is reparameterized,
        so gradients flow to the net's parameters through z."""
        mu, sigma = self._mu_sigma(s, tape)
        z = grad.add(tape, grad.mul(tape, sigma, constant(eps)), mu)
        return mu, sigma, z

    def sample(self, s, eps) -> HierarchySample:
        """Value-only draw for a given standard-normal eps."""
        mu, sigma, z = self.forward_nodes(s, eps, None)
        return HierarchySample(mu=mu.value.copy(), sigma=sigma.value.copy(),
                               eps=np.atleast_2d(np.asarray(eps, dtype=np.float64)).copy(),
                               z=z.value.copy())

    def logpdf(self, s, z, tape: Tape | None) -> Node:
        """Row-wise log-density of z under N(mu(s), sigma(s)); z is a constant."""
        mu, sigma = self._mu_sigma(s, tape)
        return grad.gaussian_logpdf(tape, constant(z), mu, sigma)

    def clone(self) -> "HierarchyNet":
        return HierarchyNet(self.state_dim, self.k, self.hidden, self.act,
                            store=self.store.clone())


class MnmpgMixer:
    """Hierarchy-conditioned monotonic mixer.

    The latent z is decoded to a non-negative vector d = |decoder(z)|;
    hypernetworks read concat(d, s) (or d alone for the no-state ablation)
    and emit the mixing weights |W1|, bias b1, |w2| and the state value V.
    """

    has_hierarchy = True

    def __init__(self, n_agents: int, state_dim: int, k: int = 3,
                 embed: int = 32, hypernet_embed: int = 64, decode_dim: int = 16,
                 act: str = "elu", detach_z: bool = False, use_state: bool = True,
                 rng: np.random.Generator | None = None,
                 store: ParamStore | None = None):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.k = k
        self.embed = embed
        self.hypernet_embed = hypernet_embed
        self.decode_dim = decode_dim
        self.act = act
        self.detach_z = detach_z
        self.use_state = use_state
        hyper_in = decode_dim + (state_dim if use_state else 0)
        self._arch = {
            "decoder": [k, decode_dim],
            "hyper_w1": [hyper_in, hypernet_embed, n_agents * embed],
            "hyper_b1": [hyper_in, embed],
            "hyper_w2": [hyper_in, hypernet_embed, embed],
            "hyper_v": [hyper_in, hypernet_embed, 1],
        }
        if store is None:
            store = ParamStore()
            rng = rng if rng is not None else np.random.default_rng(0)
            for name, arch in self._arch.items():
                grad.init_mlp(store, name, arch, rng)
        self.store = store

    def _heads(self, inp: Node, tape: Tape | None):
        w1 = grad.abs_(tape, grad.forward_mlp(self.store, "hyper_w1", inp,
                                              self._arch["hyper_w1"], self.act, tape))
        b1 = grad.forward_mlp(self.store, "hyper_b1", inp,
                              self._arch["hyper_b1"], self.act, tape)
        w2 = grad.abs_(tape, grad.forward_mlp(self.store, "hyper_w2", inp,
                                              self._arch["hyper_w2"], self.act, tape))
        v = grad.forward_mlp(self.store, "hyper_v", inp,
                             self._arch["hyper_v"], self.act, tape)
        return w1, b1, w2, v

    def mix(self, tape: Tape | None, q: Node, s, z) -> Node:
        """q: (B, n_agents) utilities; s: (B, state_dim); z: (B, K)."""
        if q.value.shape[1] != self.n_agents:
            raise grad.ShapeMismatch(
                f"mixer expects {self.n_agents} utilities, got {q.value.shape[1]}")
        if self.detach_z or not isinstance(z, Node):
            z = constant(z.value if isinstance(z, Node) else z)
        d = grad.abs_(tape, grad.forward_mlp(self.store, "decoder", z,
                                             self._arch["decoder"], self.act, tape))
        if self.use_state:
            inp = grad.concat(tape, [d, constant(s)])
        else:
            inp = d
        w1, b1, w2, v = self._heads(inp, tape)
        hidden = grad.activation(
            tape, grad.add(tape, grad.mix_matvec(tape, q, w1, self.n_agents, self.embed), b1),
            self.act)
        return grad.add(tape, grad.rowdot(tape, hidden, w2), v)

    def param_count(self) -> int:
        return self.store.n_params()

    def clone(self) -> "MnmpgMixer":
        return MnmpgMixer(self.n_agents, self.state_dim, self.k, self.embed,
                          self.hypernet_embed, self.decode_dim, self.act,
                          self.detach_z, self.use_state, store=self.store.clone())


class QmixMixer:
    """Monotonic hypernetwork mixer conditioned on the full state only."""

    has_hierarchy = False

    def __init__(self, n_agents: int, state_dim: int, embed: int = 32,
                 hypernet_embed: int = 64, act: str = "elu",
                 rng: np.random.Generator | None = None,
                 store: ParamStore | None = None):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed = embed
        self.hypernet_embed = hypernet_embed
        self.act = act
        self._arch = {
            "hyper_w1": [state_dim, hypernet_embed, n_agents * embed],
            "hyper_b1": [state_dim, embed],
            "hyper_w2": [state_dim, hypernet_embed, embed],
            "hyper_v": [state_dim, hypernet_embed, 1],
        }
        if store is None:
            store = ParamStore()
            rng = rng if rng is not None else np.random.default_rng(0)
            for name, arch in self._arch.items():
                grad.init_mlp(store, name, arch, rng)
        self.store = store

    def mix(self, tape: Tape | None, q: Node, s, z=None) -> Node:
        if q.value.shape[1] != self.n_agents:
            raise grad.ShapeMismatch(
                f"mixer expects {self.n_agents} utilities, got {q.value.shape[1]}")
        inp = constant(s)
        w1 = grad.abs_(tape, grad.forward_mlp(self.store, "hyper_w1", inp,
                                              self._arch["hyper_w1"], self.act, tape))
        b1 = grad.forward_mlp(self.store, "hyper_b1", inp,
                              self._arch["hyper_b1"], self.act, tape)
        w2 = grad.abs_(tape, grad.forward_mlp(self.store, "hyper_w2", inp,
                                              self._arch["hyper_w2"], self.act, tape))
        v = grad.forward_mlp(self.store, "hyper_v", inp,
                             self._arch["hyper_v"], self.act, tape)
        hidden = grad.activation(
            tape, grad.add(tape, grad.mix_matvec(tape, q, w1, self.n_agents, self.embed), b1),
            self.act)
        return grad.add(tape, grad.rowdot(tape, hidden, w2), v)

    def param_count(self) -> int:
        return self.store.n_params()

    def clone(self) -> "QmixMixer":
        return QmixMixer(self.n_agents, self.state_dim, self.embed,
                         self.hypernet_embed, self.act, store=self.store.clone())


class VdnMixer:
    """Plain sum of agent utilities; parameter-free."""

    has_hierarchy = False

    def __init__(self, n_agents: int):
        if n_agents < 1:
            raise ValueError("need at least one agent")
        self.n_agents = n_agents
        self.store = ParamStore()

    def mix(self, tape: Tape | None, q: Node, s=None, z=None) -> Node:
        if q.value.shape[1] != self.n_agents:
            raise grad.ShapeMismatch(
                f"mixer expects {self.n_agents} utilities, got {q.value.shape[1]}")
        return grad.rowsum(tape, q)

    def param_count(self) -> int:
        return 0

    def clone(self) -> "VdnMixer":
        return VdnMixer(self.n_agents)


def vdn_mix(q) -> float:
    """Sum of per-agent utilities for a single timestep."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size == 0:
        raise ValueError("empty utility vector")
    return float(q.sum())


def qmix_large(n_agents: int, state_dim: int, k: int = 3, embed: int = 32,
               hypernet_embed: int = 64, decode_dim: int = 16, act: str = "elu",
               rng: np.random.Generator | None = None,
               tolerance: float = 0.10) -> QmixMixer:
    """QMIX scaled so its parameter count matches the hierarchy mixer's.

    Searches the hypernet embedding width (parameter count is monotone in
    it) for the best match; raises if no width lands within tolerance.
    """
    target = MnmpgMixer(n_agents, state_dim, k, embed, hypernet_embed,
                        decode_dim, act).param_count()

    def count(e: int) -> int:
        return (
            (state_dim * e + e) + (e * n_agents * embed + n_agents * embed)
            + (state_dim * embed + embed)
            + (state_dim * e + e) + (e * embed + embed)
            + (state_dim * e + e) + (e + 1)
        )

    best, best_diff = None, None
    e = 1
    while True:
        diff = abs(count(e) - target)
        if best_diff is None or diff < best_diff:
            best, best_diff = e, diff
        if count(e) > target:
            break
        e += 1
    if best_diff / target > tolerance:
        raise ValueError(
            f"no hypernet width matches the target count {target} "
            f"within {tolerance:.0%} (closest: width {best}, off by {best_diff})")
    return QmixMixer(n_agents, state_dim, embed=embed, hypernet_embed=best,
                     act=act, rng=rng)


MIXER_NAMES = ("vdn", "qmix", "qmix_large", "mnmpg", "mnmpg_no_grad", "mnmpg_no_state")


def make_mixer(name: str, n_agents: int, state_dim: int, k: int = 3,
               embed: int = 32, hypernet_embed: int = 64, decode_dim: int = 16,
               act: str = "elu", rng: np.random.Generator | None = None):
    if name == "vdn":
        return VdnMixer(n_agents)
    if name == "qmix":
        return QmixMixer(n_agents, state_dim, embed, hypernet_embed, act, rng)
    if name == "qmix_large":
        return qmix_large(n_agents, state_dim, k, embed, hypernet_embed,
                          decode_dim, act, rng)
    if name == "mnmpg":
        return MnmpgMixer(n_agents, state_dim, k, embed, hypernet_embed,
                          decode_dim, act, rng=rng)
    if name == "mnmpg_no_grad":
        return MnmpgMixer(n_agents, state_dim, k, embed, hypernet_embed,
                          decode_dim, act, detach_z=True, rng=rng)
    if name == "mnmpg_no_state":
        return MnmpgMixer(n_agents, state_dim, k, embed, hypernet_embed,
                          decode_dim, act, use_state=False, rng=rng)
    raise ValueError(f"unknown mixer {name!r}; expected one of {MIXER_NAMES}")


def igm_check(mix_values, q_tables: np.ndarray, max_joint: int = 100_000) -> bool:
    """Does the joint argmax of the mixed value match per-agent argmaxes?

    mix_values: callable taking a (B, n_agents) array of chosen utilities
    and returning (B,) mixed values. q_tables: (n_agents, action_count).
    Ties resolve to the lowest index at both levels.
    """
    q_tables = np.asarray(q_tables, dtype=np.float64)
    n, a = q_tables.shape
    if a ** n > max_joint:
        raise ValueError(f"joint action space {a}**{n} too large to enumerate")
    joint = list(itertools.product(range(a), repeat=n))
    chosen = np.array([[q_tables[i, ja[i]] for i in range(n)] for ja in joint])
    totals = mix_values(chosen)
    best_joint = joint[int(np.argmax(totals))]
    greedy = tuple(int(np.argmax(q_tables[i])) for i in range(n))
    return best_joint == greedy


def igm_check_mixer(mixer, q_tables: np.ndarray, s=None, z=None) -> bool:
    """igm_check for a mixer instance: s and z are single rows, replicated
    across the enumerated joint actions."""

    def mix_values(chosen: np.ndarray) -> np.ndarray:
        b = chosen.shape[0]
        q = constant(chosen)
        srep = None if s is None else np.repeat(np.atleast_2d(s), b, axis=0)
        zrep = None if z is None else np.repeat(np.atleast_2d(z), b, axis=0)
        return mixer.mix(None, q, srep, zrep).value[:, 0]

    return igm_check(mix_values, q_tables)
