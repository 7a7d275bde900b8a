"""Benchmark environments: two-state counterexample, Baird's star, MountainCar.

Each environment produces :class:`~gesarsa.learners.Transition` records under
its behaviour policy.  The tabular ones also export themselves exactly as a
:class:`~gesarsa.mdp.FiniteMdp` for the analytic tools.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .learners import Transition
from .mdp import FeatureMap, FiniteMdp, Policy, importance_ratios

# -- two-state counterexample ---------------------------------------------------

LEFT, RIGHT = 0, 1
TWO_STATE_PAIR_ORDER = ((0, RIGHT), (1, RIGHT), (0, LEFT), (1, LEFT))
TWO_STATE_FEATURES = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 2.0]])


@dataclass(frozen=True)
class TwoStateSpec:
    """Two states; ``right`` leads to s2 and ``left`` to s1 from either state.

    Behaviour plays right with probability 0.5, the target always plays right.
    The task is continuing: an "episode" is a segment of ``episode_length``
    steps of one unbroken trajectory, and the trace is carried across segments.
    """

    gamma: float = 0.99
    lam: float = 0.99
    reward: tuple = ((0.0, 0.0), (0.0, 0.0))
    episode_length: int = 100
    mu_right: float = 0.5
    pi_right: float = 1.0

    continuing = True

    def as_finite_mdp(self):
        p = np.zeros((2, 2, 2))
        p[:, RIGHT, 1] = 1.0
        p[:, LEFT, 0] = 1.0
        mdp = FiniteMdp(p, np.array(self.reward, dtype=float), self.gamma, pair_order=TWO_STATE_PAIR_ORDER)
        mu = Policy([[1 - self.mu_right, self.mu_right]] * 2)
        pi = Policy([[1 - self.pi_right, self.pi_right]] * 2)
        return mdp, pi, mu, FeatureMap.for_mdp(mdp, TWO_STATE_FEATURES)

    def with_reward(self, reward) -> "TwoStateSpec":
        return TwoStateSpec(self.gamma, self.lam, tuple(map(tuple, np.asarray(reward, float))),
                            self.episode_length, self.mu_right, self.pi_right)


# -- Baird's star ------------------------------------------------------------

DASHED, SOLID = 0, 1


def baird_features() -> np.ndarray:
    """14 x 16 feature matrix; rows are (s, dashed) for s = 1..7 then (s, solid)."""
    top = np.hstack([2 * np.eye(7), np.ones((7, 1)), np.zeros((7, 8))])
    bottom = np.hstack([np.zeros((7, 8)), 2 * np.eye(7), np.ones((7, 1))])
    return np.vstack([top, bottom])


@dataclass(frozen=True)
class BairdStarSpec:
    """Seven states; ``dashed`` jumps uniformly to one of the six upper states, ``solid`` to state 7.

    Episodes have a fixed length and restart from a uniform state; the trace
    is cleared at each restart.
    """

    gamma: float = 0.99
    lam: float = 0.99
    episode_length: int = 20
    mu_solid: float = 1.0 / 7.0

    continuing = False

    def as_finite_mdp(self):
        p = np.zeros((7, 2, 7))
        p[:, DASHED, :6] = 1.0 / 6.0
        p[:, SOLID, 6] = 1.0
        order = tuple((s, DASHED) for s in range(7)) + tuple((s, SOLID) for s in range(7))
        mdp = FiniteMdp(p, np.zeros((7, 2)), self.gamma, pair_order=order)
        mu = Policy([[1 - self.mu_solid, self.mu_solid]] * 7)
        pi = Policy([[0.0, 1.0]] * 7)
        return mdp, pi, mu, FeatureMap.for_mdp(mdp, baird_features())


def as_finite_mdp(spec):
    """Exact tabular export ``(mdp, pi, mu, features)`` of a tabular spec."""
    return spec.as_finite_mdp()


class TabularEnv:
    """Sampler for a tabular spec under its behaviour policy."""

    def __init__(self, spec):
        self.spec = spec
        self.mdp, self.pi, self.mu, self.features = spec.as_finite_mdp()
        self.rho = importance_ratios(self.pi, self.mu)
        self.phi_bar = self.features.expected_next(self.pi)
        self._mu_cdf = np.cumsum(self.mu.probs, axis=1)
        self._p_cdf = np.cumsum(self.mdp.transition, axis=2)
        self.rho_max = float(self.rho.max())

    @property
    def p(self) -> int:
        return self.features.p

    def reset(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.mdp.n_states))

    def sample_transition(self, state: int, rng: np.random.Generator, action: int | None = None) -> Transition:
        u_a, u_s = rng.random(2)
        if action is None:
            action = int(np.searchsorted(self._mu_cdf[state], u_a, side="right"))
            action = min(action, self.mdp.n_actions - 1)
        nxt = int(np.searchsorted(self._p_cdf[state, action], u_s, side="right"))
        nxt = min(nxt, self.mdp.n_states - 1)
        return self._transition(state, action, nxt)

    def stream(self, n_episodes: int, rng: np.random.Generator) -> Iterator[Transition]:
        """Transitions of ``n_episodes`` episodes; the last one of each is flagged ``episode_end``.

        For continuing specs the segments are consecutive pieces of a single
        trajectory and ``episode_end`` is not set (the trace keeps running).
        Uniforms are drawn one episode at a time, in the same order as
        repeated :meth:`sample_transition` calls would draw them.
        """
        length = self.spec.episode_length
        cache: dict = {}
        state = self.reset(rng)
        for _ in range(n_episodes):
            if not self.spec.continuing:
                state = self.reset(rng)
            u = rng.random((length, 2))
            for k in range(length):
                action = min(int(np.searchsorted(self._mu_cdf[state], u[k, 0], side="right")), self.mdp.n_actions - 1)
                nxt = min(int(np.searchsorted(self._p_cdf[state, action], u[k, 1], side="right")), self.mdp.n_states - 1)
                key = (state, action, nxt)
                tr = cache.get(key)
                if tr is None:
                    tr = cache[key] = self._transition(state, action, nxt)
                if tr.terminal or (k == length - 1 and not self.spec.continuing):
                    tr = tr._replace(episode_end=True)
                yield tr
                if tr.terminal:
                    break
                state = nxt

    def _transition(self, state: int, action: int, nxt: int) -> Transition:
        terminal = nxt in self.mdp.terminal
        return Transition(
            s=state,
            a=action,
            r=float(self.mdp.reward[state, action]),
            s_next=nxt,
            rho=float(self.rho[state, action]),
            phi=self.features.phi(state, action),
            expected_phi_next=np.zeros(self.p) if terminal else self.phi_bar[nxt],
            terminal=terminal,
        )


def sample_transition(spec, state, rng: np.random.Generator, action: int | None = None) -> Transition:
    """One behaviour-policy step of ``spec`` from ``state``."""
    if isinstance(spec, MountainCarSpec):
        return MountainCarEnv(spec).sample_transition(state, rng, action)
    return TabularEnv(spec).sample_transition(state, rng, action)


# -- MountainCar -------------------------------------------------------------

MC_LEFT, MC_NEUTRAL, MC_RIGHT = 0, 1, 2
POSITION_RANGE = (-1.2, 0.6)
VELOCITY_RANGE = (-0.07, 0.07)


@dataclass(frozen=True)
class MountainCarSpec:
    gamma: float = 0.99
    lam: float = 0.99
    n_tilings: int = 4
    grid: int = 8
    max_steps: int = 5000
    start_position: tuple = (-0.6, -0.4)
    mu_forward: tuple = (0.01, 0.01, 0.98)
    pi_forward: tuple = (0.1, 0.1, 0.8)

    n_actions = 3

    @property
    def tiles_per_tiling(self) -> int:
        return (self.grid + 1) ** 2

    @property
    def p(self) -> int:
        return self.n_actions * self.n_tilings * self.tiles_per_tiling

    def policies(self, velocity: float):
        """(mu, pi) action distributions for a given velocity."""
        if velocity > 0:
            return np.array(self.mu_forward), np.array(self.pi_forward)
        return np.array(self.mu_forward[::-1]), np.array(self.pi_forward[::-1])

    @property
    def rho_max(self) -> float:
        mu, pi = np.array(self.mu_forward), np.array(self.pi_forward)
        return float(np.max(pi / mu))


def clip_state(position: float, velocity: float) -> tuple[float, float]:
    return (
        min(max(position, POSITION_RANGE[0]), POSITION_RANGE[1]),
        min(max(velocity, VELOCITY_RANGE[0]), VELOCITY_RANGE[1]),
    )


def tile_code(spec: MountainCarSpec, position: float, velocity: float, action: int) -> np.ndarray:
    """Active feature indices: one tile per tiling, in the block of ``action``.

    Tiling ``i`` is a grid x grid partition of the state box shifted by
    i/n_tilings of a tile along the diagonal; grid + 1 tiles per axis cover
    the shifted copies.  Out-of-box states are clipped first.
    """
    position, velocity = clip_state(position, velocity)
    g = spec.grid
    wp = (POSITION_RANGE[1] - POSITION_RANGE[0]) / g
    wv = (VELOCITY_RANGE[1] - VELOCITY_RANGE[0]) / g
    n = g + 1
    out = np.empty(spec.n_tilings, dtype=np.int64)
    base = action * spec.n_tilings * spec.tiles_per_tiling
    for i in range(spec.n_tilings):
        off = i / spec.n_tilings
        ip = min(int(math.floor((position - POSITION_RANGE[0]) / wp + off)), n - 1)
        iv = min(int(math.floor((velocity - VELOCITY_RANGE[0]) / wv + off)), n - 1)
        out[i] = base + i * spec.tiles_per_tiling + iv * n + ip
    return out


def mountaincar_step(spec: MountainCarSpec, state, action: int, rng=None):
    """Deterministic dynamics; returns ``((position, velocity), reward, terminal)``.

    ``rng`` is accepted for interface symmetry; the dynamics use no noise.
    """
    position, velocity = state
    velocity = velocity + 0.001 * (action - 1) - 0.0025 * math.cos(3 * position)
    velocity = min(max(velocity, VELOCITY_RANGE[0]), VELOCITY_RANGE[1])
    position = position + velocity
    if position <= POSITION_RANGE[0]:
        position = POSITION_RANGE[0]
        velocity = 0.0
    position = min(position, POSITION_RANGE[1])
    terminal = position >= POSITION_RANGE[1]
    return (position, velocity), -1.0, terminal


class MountainCarEnv:
    def __init__(self, spec: MountainCarSpec):
        self.spec = spec
        self.rho_max = spec.rho_max

    @property
    def p(self) -> int:
        return self.spec.p

    def features(self, state, action: int) -> np.ndarray:
        phi = np.zeros(self.spec.p)
        phi[tile_code(self.spec, state[0], state[1], action)] = 1.0
        return phi

    def expected_features(self, state, probs) -> np.ndarray:
        phi = np.zeros(self.spec.p)
        for a, w in enumerate(probs):
            if w > 0:
                phi[tile_code(self.spec, state[0], state[1], a)] += w
        return phi

    def reset(self, rng: np.random.Generator):
        lo, hi = self.spec.start_position
        return (float(rng.uniform(lo, hi)), 0.0)

    def sample_transition(self, state, rng: np.random.Generator, action: int | None = None) -> Transition:
        mu, pi = self.spec.policies(state[1])
        if action is None:
            action = int(rng.choice(3, p=mu))
        nxt, reward, terminal = mountaincar_step(self.spec, state, action)
        if terminal:
            phi_next = np.zeros(self.spec.p)
        else:
            phi_next = self.expected_features(nxt, self.spec.policies(nxt[1])[1])
        return Transition(
            s=state,
            a=action,
            r=reward,
            s_next=nxt,
            rho=float(pi[action] / mu[action]),
            phi=self.features(state, action),
            expected_phi_next=phi_next,
            terminal=terminal,
        )

    def stream(self, n_episodes: int, rng: np.random.Generator) -> Iterator[Transition]:
        for _ in range(n_episodes):
            state = self.reset(rng)
            for k in range(self.spec.max_steps):
                tr = self.sample_transition(state, rng)
                last = tr.terminal or k == self.spec.max_steps - 1
                if last:
                    tr = tr._replace(episode_end=True)
                yield tr
                if last:
                    break
                state = tr.s_next

    def target_rollout_return(self, state, action: int, horizon: int, rng: np.random.Generator) -> float:
        """Discounted return of one target-policy rollout from ``(state, action)``."""
        g, disc = 0.0, 1.0
        for _ in range(horizon):
            state, r, terminal = mountaincar_step(self.spec, state, action)
            g += disc * r
            disc *= self.spec.gamma
            if terminal:
                break
            action = int(rng.choice(3, p=self.spec.policies(state[1])[1]))
        return g


ENVIRONMENTS = {
    "two-state": TwoStateSpec,
    "baird": BairdStarSpec,
    "mountaincar": MountainCarSpec,
}


def make_env(spec):
    return MountainCarEnv(spec) if isinstance(spec, MountainCarSpec) else TabularEnv(spec)


def make_spec(name: str, **overrides):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    if name == "two-state" and "reward" in overrides:
        overrides["reward"] = tuple(map(tuple, np.asarray(overrides["reward"], dtype=float)))
    return cls(**overrides)

