"""Finite MDPs, policies, feature maps and state-action transition operators.

Every matrix in this package that is indexed by state-action pairs uses the
pair enumeration of the owning :class:`FiniteMdp`.  By default that is
row-major over ``(state, action)``; environments may install an explicit
ordering (the two-state counterexample does, so that its matrices line up
with the published ones).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

PROB_ATOL = 1e-12
MDP_SCHEMA_VERSION = 1


class ErgodicityError(ValueError):
    """The behaviour chain has no strictly positive stationary distribution."""


def _as_prob_table(x, name: str, axis: int = -1) -> np.ndarray:
    x = np.array(x, dtype=float)
    if np.any(x < 0):
        raise ValueError(f"{name} has negative entries")
    sums = x.sum(axis=axis)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=PROB_ATOL):
        worst = np.max(np.abs(sums - 1.0))
        raise ValueError(f"{name} rows must sum to 1 (max deviation {worst:.3e})")
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP with transition tensor ``p[s, a, s']`` and reward table ``R[s, a]``."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal: frozenset = frozenset()
    pair_order: tuple | None = None

    def __post_init__(self):
        p = _as_prob_table(self.transition, "transition")
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        r = np.array(self.reward, dtype=float)
        if r.shape != p.shape[:2]:
            raise ValueError(f"reward must have shape {p.shape[:2]}, got {r.shape}")
        r.setflags(write=False)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "terminal", frozenset(int(s) for s in self.terminal))
        for s in self.terminal:
            if not np.allclose(p[s, :, s], 1.0):
                raise ValueError(f"terminal state {s} is not absorbing")

        if self.pair_order is None:
            order = tuple((s, a) for s in range(p.shape[0]) for a in range(p.shape[1]))
        else:
            order = tuple((int(s), int(a)) for s, a in self.pair_order)
            if sorted(order) != [(s, a) for s in range(p.shape[0]) for a in range(p.shape[1])]:
                raise ValueError("pair_order must enumerate every (state, action) pair exactly once")
        object.__setattr__(self, "pair_order", order)
        object.__setattr__(self, "_index", {pair: i for i, pair in enumerate(order)})

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    @property
    def pairs(self) -> tuple:
        return self.pair_order

    def pair_index(self, s: int, a: int) -> int:
        return self._index[(s, a)]

    @property
    def permutation(self) -> np.ndarray:
        """Row-major flat index of each pair, listed in pair order."""
        return np.array([s * self.n_actions + a for s, a in self.pair_order])

    def reward_vector(self) -> np.ndarray:
        """Expected reward per pair, in pair order."""
        return self.reward.reshape(-1)[self.permutation]

    def with_reward(self, reward) -> "FiniteMdp":
        return FiniteMdp(self.transition, reward, self.gamma, self.terminal, self.pair_order)

    def with_gamma(self, gamma: float) -> "FiniteMdp":
        return FiniteMdp(self.transition, self.reward, gamma, self.terminal, self.pair_order)


@dataclass(frozen=True)
class Policy:
    """Stochastic policy ``probs[s, a] = pi(a | s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _as_prob_table(self.probs, "policy")
        if probs.ndim != 2:
            raise ValueError("policy table must be 2-D (states x actions)")
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def __call__(self, a: int, s: int) -> float:
        return float(self.probs[s, a])

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


@dataclass(frozen=True)
class FeatureMap:
    """Linear features for the pairs of one MDP.

    ``matrix`` is the |S||A| x p matrix whose rows are the feature vectors,
    listed in the MDP's pair order.
    """

    matrix: np.ndarray
    pairs: tuple
    phi_max: float | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != len(self.pairs):
            raise ValueError(f"feature matrix needs one row per pair ({len(self.pairs)}), got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        bound = float(np.max(np.abs(m))) if m.size else 0.0
        if self.phi_max is None:
            object.__setattr__(self, "phi_max", bound)
        elif bound > self.phi_max + 1e-12:
            raise ValueError(f"features exceed declared phi_max={self.phi_max} (found {bound})")
        object.__setattr__(self, "_index", {pair: i for i, pair in enumerate(self.pairs)})

    @classmethod
    def for_mdp(cls, mdp: FiniteMdp, matrix, phi_max=None) -> "FeatureMap":
        return cls(matrix, mdp.pairs, phi_max)

    @classmethod
    def from_function(cls, mdp: FiniteMdp, fn: Callable[[int, int], Sequence[float]]) -> "FeatureMap":
        return cls(np.array([fn(s, a) for s, a in mdp.pairs], dtype=float), mdp.pairs)

    @classmethod
    def tabular(cls, mdp: FiniteMdp) -> "FeatureMap":
        return cls(np.eye(mdp.n_pairs), mdp.pairs)

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    def phi(self, s: int, a: int) -> np.ndarray:
        return self.matrix[self._index[(s, a)]]

    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.matrix))

    def expected_next(self, pi: Policy) -> np.ndarray:
        """``out[s] = sum_a pi(a|s) phi(s, a)`` for every state."""
        out = np.zeros((pi.n_states, self.p))
        for (s, a), row in zip(self.pairs, self.matrix):
            out[s] += pi.probs[s, a] * row
        return out


@dataclass(frozen=True)
class StationaryDistribution:
    xi: np.ndarray
    iterations: int = 0
    method: str = "power"

    @property
    def Xi(self) -> np.ndarray:
        return np.diag(self.xi)


def _check_policy(mdp: FiniteMdp, pi: Policy) -> None:
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {pi.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def state_action_transition(mdp: FiniteMdp, pi: Policy) -> np.ndarray:
    """Pair-level transition matrix ``P[(s,a),(s',a')] = p(s'|s,a) pi(a'|s')``."""
    _check_policy(mdp, pi)
    S, A = mdp.n_states, mdp.n_actions
    full = np.einsum("iaj,jb->iajb", mdp.transition, pi.probs).reshape(S * A, S * A)
    perm = mdp.permutation
    return full[np.ix_(perm, perm)]


def _solve_stationary(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    # xi^T (P - I) = 0 with sum(xi) = 1, as a least-squares system
    lhs = np.vstack([(P - np.eye(n)).T, np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    xi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return xi


def stationary_distribution(
    mdp: FiniteMdp,
    mu: Policy,
    tol: float = 1e-12,
    max_iter: int = 10**6,
    dense_fallback_max: int = 2000,
) -> StationaryDistribution:
    """Stationary distribution of the pair chain under ``mu``.

    Power iteration runs on the lazy chain (I + P)/2, which has the same
    invariant vector but is aperiodic.  If it stalls, chains with at most
    ``dense_fallback_max`` pairs are solved directly.  A chain that is not
    irreducible (some pair transient or several closed classes) has no
    strictly positive stationary distribution and raises
    :class:`ErgodicityError`.
    """
    P = state_action_transition(mdp, mu)
    n = P.shape[0]
    lazy = 0.5 * (P + np.eye(n))
    x = np.full(n, 1.0 / n)
    method = "power"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        nxt = x @ lazy
        if np.max(np.abs(nxt - x)) < tol:
            x = nxt
            converged = True
            break
        x = nxt
    if not converged:
        if n > dense_fallback_max:
            raise ErgodicityError(f"power iteration did not converge within {max_iter} iterations")
        x = _solve_stationary(P)
        method = "dense"

    x = x / x.sum()
    n_classes, _ = connected_components(csr_matrix(P > 0.0), directed=True, connection="strong")
    if n_classes > 1:
        raise ErgodicityError(
            f"behaviour chain is not irreducible ({n_classes} strongly connected classes); "
            "some pair would get zero stationary mass"
        )
    if np.min(x) <= 0.0 or not np.all(np.isfinite(x)):
        raise ErgodicityError(f"stationary mass {np.min(x):.3e} on some pair")
    if np.max(np.abs(x @ P - x)) > 1e-8:
        raise ErgodicityError("stationary distribution failed the invariance check")
    return StationaryDistribution(x, iterations=it, method=method)


def coverage_check(pi: Policy, mu: Policy) -> bool:
    """True iff every action the target may take is also possible under the behaviour policy."""
    if pi.probs.shape != mu.probs.shape:
        raise ValueError("policies disagree on the state/action dimensions")
    return bool(np.all((pi.probs <= 0.0) | (mu.probs > 0.0)))


def importance_ratios(pi: Policy, mu: Policy) -> np.ndarray:
    """Table of pi(a|s)/mu(a|s); zero where mu(a|s) is zero (never sampled)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(mu.probs > 0, pi.probs / np.where(mu.probs > 0, mu.probs, 1.0), 0.0)
    return rho


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    gamma: float,
    reward_scale: float = 1.0,
    concentration: float = 1.0,
) -> FiniteMdp:
    """Dense random MDP; every transition row is Dirichlet distributed, so the chain is ergodic."""
    p = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    r = reward_scale * rng.standard_normal((n_states, n_actions))
    return FiniteMdp(p, r, gamma)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int, floor: float = 0.0) -> Policy:
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    if floor > 0:
        probs = (probs + floor) / (1.0 + n_actions * floor)
    return Policy(probs)


# -- MDP file format ----------------------------------------------------------
#
# YAML document:
#   schema_version: 1
#   n_states: int
#   n_actions: int
#   gamma: float
#   transition: p[s][a][s'] nested lists
#   reward: R[s][a]
#   terminal: [states]                 (optional)
#   pair_order: [[s, a], ...]          (optional, default row-major)
#   policies: {name: pi[s][a], ...}
#   features: rows in pair order       (optional)
#   lambda: float                      (optional default trace decay)


@dataclass
class MdpDocument:
    mdp: FiniteMdp
    policies: dict = field(default_factory=dict)
    features: FeatureMap | None = None
    lam: float | None = None


def load_mdp_file(path: str | Path) -> MdpDocument:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return parse_mdp_document(doc)


def parse_mdp_document(doc: dict) -> MdpDocument:
    version = doc.get("schema_version", MDP_SCHEMA_VERSION)
    if version != MDP_SCHEMA_VERSION:
        raise ValueError(f"unsupported MDP schema_version {version}")
    mdp = FiniteMdp(
        np.array(doc["transition"], dtype=float),
        np.array(doc["reward"], dtype=float),
        float(doc["gamma"]),
        frozenset(doc.get("terminal", []) or []),
        doc.get("pair_order"),
    )
    for key in ("n_states", "n_actions"):
        if key in doc and doc[key] != getattr(mdp, key):
            raise ValueError(f"{key}={doc[key]} disagrees with the transition tensor")
    policies = {name: Policy(np.array(t, dtype=float)) for name, t in (doc.get("policies") or {}).items()}
    for name, pol in policies.items():
        _check_policy(mdp, pol)
    features = None
    if doc.get("features") is not None:
        features = FeatureMap.for_mdp(mdp, np.array(doc["features"], dtype=float))
    lam = doc.get("lambda")
    return MdpDocument(mdp, policies, features, None if lam is None else float(lam))


def mdp_document(mdp: FiniteMdp, policies: dict, features: FeatureMap | None = None, lam=None) -> dict:
    doc = {
        "schema_version": MDP_SCHEMA_VERSION,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": float(mdp.gamma),
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "terminal": sorted(mdp.terminal),
        "pair_order": [list(p) for p in mdp.pairs],
        "policies": {name: pol.probs.tolist() for name, pol in policies.items()},
    }
    if features is not None:
        doc["features"] = features.matrix.tolist()
    if lam is not None:
        doc["lambda"] = float(lam)
    return doc


def save_mdp_file(path: str | Path, mdp: FiniteMdp, policies: dict, features=None, lam=None) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(mdp_document(mdp, policies, features, lam), fh, sort_keys=False)

