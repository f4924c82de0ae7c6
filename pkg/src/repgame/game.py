"""Ground-truth Markov games, the block-observation simulator and exact DP evaluation.

Steps are 0-indexed throughout: a game of horizon ``H`` acts at steps
``0..H-1`` and emits a terminal observation at step ``H``. Joint actions are
flattened row-major over ``action_sizes`` (player 0 most significant).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

# Tolerances shared by every module.
TOL_DP = 1e-9
TOL_SIMPLEX = 1e-12

CONCEPTS = ("ne", "cce", "ce")
OBS_MODES = ("categorical", "hadamard")


class GameError(ValueError):
    """Raised on malformed games, policies or out-of-range steps."""


def _check_simplex(arr: np.ndarray, axis: int, what: str) -> None:
    if np.any(arr < 0):
        raise GameError(f"{what} has negative entries")
    sums = arr.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > TOL_SIMPLEX * max(1, arr.shape[axis])):
        raise GameError(f"{what} rows do not sum to one (max error {np.abs(sums - 1).max():.3g})")


@dataclass(frozen=True, eq=False)
class LatentGame:
    """Finite-horizon tabular Markov game.

    transitions: (H, Z, A, Z) next-state distributions.
    rewards: (H, M, Z, A) per-player rewards in [-1, 1].
    init_dist: (Z,) initial latent distribution.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    init_dist: np.ndarray
    action_sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "transitions", np.asarray(self.transitions, dtype=float))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))
        object.__setattr__(self, "init_dist", np.asarray(self.init_dist, dtype=float))
        object.__setattr__(self, "action_sizes", tuple(int(a) for a in self.action_sizes))
        H, Z, A, Z2 = self.transitions.shape
        if Z != Z2 or A != self.n_joint:
            raise GameError(f"transition shape {self.transitions.shape} inconsistent with action sizes {self.action_sizes}")
        if self.rewards.shape != (H, self.n_players, Z, A):
            raise GameError(f"reward shape {self.rewards.shape} != {(H, self.n_players, Z, A)}")
        if self.init_dist.shape != (Z,):
            raise GameError("init_dist has the wrong length")
        _check_simplex(self.transitions, -1, "transition")
        _check_simplex(self.init_dist, 0, "init_dist")
        if np.any(np.abs(self.rewards) > 1.0):
            raise GameError("reward magnitudes must be <= 1")

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_players(self) -> int:
        return len(self.action_sizes)

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.action_sizes))

    def is_zero_sum(self) -> bool:
        return self.n_players == 2 and np.allclose(self.rewards[:, 0], -self.rewards[:, 1], atol=TOL_SIMPLEX, rtol=0)

    def as_tabular(self, transitions=None, rewards=None) -> "TabularGame":
        P = self.transitions if transitions is None else np.asarray(transitions, dtype=float)
        r = self.rewards if rewards is None else np.asarray(rewards, dtype=float)
        if P.shape != self.transitions.shape or r.shape != self.rewards.shape:
            raise GameError("transition/reward model does not match the game dimensions")
        return TabularGame(tuple(P), tuple(r), self.init_dist, self.action_sizes)


@dataclass(frozen=True, eq=False)
class TabularGame:
    """Per-step tabular game whose state sets may differ between steps.

    transitions[h]: (S_h, A, S_{h+1}) sub-stochastic rows.
    rewards[h]: (M, S_h, A).
    """

    transitions: tuple[np.ndarray, ...]
    rewards: tuple[np.ndarray, ...]
    init_dist: np.ndarray
    action_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.transitions) != len(self.rewards):
            raise GameError("transitions and rewards disagree on the horizon")
        for h, (P, r) in enumerate(zip(self.transitions, self.rewards)):
            if P.shape[1] != self.n_joint or r.shape[1:] != P.shape[:2]:
                raise GameError(f"dimension mismatch at step {h}")
            if h + 1 < self.horizon and P.shape[2] != self.transitions[h + 1].shape[0]:
                raise GameError(f"state count mismatch between steps {h} and {h + 1}")
            if np.any(P.sum(-1) > 1 + TOL_DP):
                raise GameError(f"transition rows at step {h} exceed total mass one")
        if self.init_dist.shape[0] != self.transitions[0].shape[0]:
            raise GameError("init_dist length mismatch")

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    @property
    def n_players(self) -> int:
        return len(self.action_sizes)

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.action_sizes))

    def n_states(self, h: int) -> int:
        return self.transitions[h].shape[0]


def _as_tabular(game) -> TabularGame:
    if isinstance(game, TabularGame):
        return game
    if isinstance(game, LatentGame):
        return game.as_tabular()
    if isinstance(game, BlockEnv):
        return game.observation_game
    raise TypeError(f"cannot evaluate {type(game).__name__}")


def obs_key(obs):
    """Hashable cache key for an observation (int symbol or float vector)."""
    if isinstance(obs, (int, np.integer)):
        return int(obs)
    return np.asarray(obs, dtype=float).tobytes()


def sylvester_hadamard(n: int) -> np.ndarray:
    if n < 1 or n & (n - 1):
        raise GameError(f"Hadamard dimension must be a power of two, got {n}")
    H = np.ones((1, 1))
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


@dataclass(frozen=True, eq=False)
class BlockEnv:
    """Latent game plus per-step emissions with disjoint supports.

    categorical mode: ``emission`` (H+1, Z, O) and ``decoder`` (H+1, O).
    hadamard mode: observation = Hadamard @ pad(onehot(z) ++ onehot(h) + noise),
    resampled until the true decoder recovers z, so the block property holds.
    """

    latent: LatentGame
    obs_mode: str = "categorical"
    emission: np.ndarray | None = None
    decoder: np.ndarray | None = None
    sigma: float = 0.1
    seed: int | None = None
    eval_samples: int = 16

    def __post_init__(self):
        if self.obs_mode not in OBS_MODES:
            raise GameError(f"unknown obs_mode {self.obs_mode!r}")
        H, Z = self.latent.horizon, self.latent.n_states
        if self.obs_mode == "categorical":
            em = np.asarray(self.emission, dtype=float)
            dec = np.asarray(self.decoder, dtype=np.int64)
            object.__setattr__(self, "emission", em)
            object.__setattr__(self, "decoder", dec)
            if em.ndim != 3 or em.shape[:2] != (H + 1, Z) or dec.shape != (H + 1, em.shape[2]):
                raise GameError("emission/decoder shapes inconsistent with the latent game")
            _check_simplex(em, -1, "emission")
            # Block property: each observation is emitted by exactly one latent.
            positive = em > 0
            if np.any(positive.sum(axis=1) != 1):
                raise GameError("emission supports overlap or leave an observation unreachable")
            if np.any(np.argmax(positive, axis=1) != dec):
                raise GameError("decoder does not invert the emission supports")

    # -- sizes -------------------------------------------------------------
    @property
    def horizon(self) -> int:
        return self.latent.horizon

    @property
    def action_sizes(self) -> tuple[int, ...]:
        return self.latent.action_sizes

    @property
    def n_players(self) -> int:
        return self.latent.n_players

    @property
    def n_joint(self) -> int:
        return self.latent.n_joint

    @property
    def n_obs(self) -> int:
        if self.obs_mode != "categorical":
            raise GameError("hadamard observations are continuous")
        return self.emission.shape[2]

    @property
    def obs_dim(self) -> int:
        return 1 << int(np.ceil(np.log2(self.horizon + self.latent.n_states + 1)))

    @cached_property
    def hadamard(self) -> np.ndarray:
        return sylvester_hadamard(self.obs_dim)

    # -- simulator internals ------------------------------------------------
    def sample_obs(self, h: int, z: int, rng: np.random.Generator):
        if self.obs_mode == "categorical":
            cdf = np.cumsum(self.emission[h, z])
            return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), cdf.size - 1))
        Z = self.latent.n_states
        base = np.zeros(Z + self.horizon + 1)
        base[z] = 1.0
        base[Z + h] = 1.0
        while True:
            raw = np.zeros(self.obs_dim)
            raw[: base.size] = base + self.sigma * rng.standard_normal(base.size)
            obs = self.hadamard @ raw
            if self.decode(h, obs) == z:
                return obs

    def decode(self, h: int, obs) -> int:
        """Ground-truth decoder; privileged, used by the simulator and evaluation only."""
        if self.obs_mode == "categorical":
            return int(self.decoder[h, obs])
        coords = self.hadamard @ np.asarray(obs, dtype=float) / self.obs_dim
        return int(np.argmax(coords[: self.latent.n_states]))

    def reset(self, rng: np.random.Generator):
        z = _sample(self.latent.init_dist, rng)
        return self.sample_obs(0, z, rng)

    def step(self, h: int, obs, action: int, rng: np.random.Generator):
        if not 0 <= h < self.horizon:
            raise GameError(f"step {h} out of range 0..{self.horizon - 1}")
        z = self.decode(h, obs)
        z_next = _sample(self.latent.transitions[h, z, action], rng)
        return self.sample_obs(h + 1, z_next, rng)

    def reward(self, h: int, obs) -> np.ndarray:
        """Per-player rewards (M, A) at an observation; the learner-facing reward interface."""
        return self.latent.rewards[h, :, self.decode(h, obs), :]

    # -- evaluation support -------------------------------------------------
    @cached_property
    def supports(self) -> tuple[tuple[list, np.ndarray, np.ndarray], ...]:
        """Per step (observations, latents, emission weights) used by exact evaluation.

        Categorical mode enumerates every observation; hadamard mode uses a fixed
        seeded sample of ``eval_samples`` observations per latent with equal weights.
        """
        out = []
        Z = self.latent.n_states
        if self.obs_mode == "categorical":
            for h in range(self.horizon + 1):
                obs = list(range(self.n_obs))
                lat = self.decoder[h].copy()
                w = self.emission[h, lat, np.arange(self.n_obs)]
                out.append((obs, lat, w))
            return tuple(out)
        rng = np.random.default_rng([0 if self.seed is None else self.seed, 7919])
        K = self.eval_samples
        for h in range(self.horizon + 1):
            obs = [self.sample_obs(h, z, rng) for z in range(Z) for _ in range(K)]
            lat = np.repeat(np.arange(Z), K)
            out.append((obs, lat, np.full(Z * K, 1.0 / K)))
        return tuple(out)

    @cached_property
    def observation_game(self) -> TabularGame:
        """Exact tabular game over the evaluation support observations."""
        lg = self.latent
        Ps, rs = [], []
        for h in range(self.horizon):
            _, lat, _ = self.supports[h]
            _, lat_next, w_next = self.supports[h + 1]
            # P(s'|s,a) = T(z(s')|z(s),a) * o(s'|z(s'))
            Ps.append(lg.transitions[h][lat][:, :, lat_next] * w_next)
            rs.append(lg.rewards[h][:, lat, :])
        _, lat0, w0 = self.supports[0]
        return TabularGame(tuple(Ps), tuple(rs), lg.init_dist[lat0] * w0, lg.action_sizes)


def _sample(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), cdf.size - 1))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

Resolver = Callable[[int, object], "np.ndarray | None"]


class JointPolicy:
    """Step- and observation-conditioned distribution over joint actions.

    Distributions are produced lazily by ``resolver(h, obs)`` and cached by
    observation; observations the resolver cannot answer get the uniform joint
    distribution. The cache is not thread-safe.
    """

    def __init__(self, action_sizes: Sequence[int], horizon: int, resolver: Resolver | None = None,
                 kind: str = "correlated", provenance: dict | None = None):
        if kind not in ("product", "correlated"):
            raise GameError(f"unknown policy kind {kind!r}")
        self.action_sizes = tuple(int(a) for a in action_sizes)
        self.horizon = int(horizon)
        self.kind = kind
        self.provenance = dict(provenance or {})
        self._resolver = resolver
        self._cache: list[dict] = [dict() for _ in range(self.horizon)]

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.action_sizes))

    def dist(self, h: int, obs) -> np.ndarray:
        if not 0 <= h < self.horizon:
            raise GameError(f"policy queried at step {h} outside 0..{self.horizon - 1}")
        key = obs_key(obs)
        cache = self._cache[h]
        out = cache.get(key)
        if out is None:
            out = self._resolver(h, obs) if self._resolver is not None else None
            if out is None:
                out = np.full(self.n_joint, 1.0 / self.n_joint)
            out = np.asarray(out, dtype=float)
            if out.shape != (self.n_joint,) or abs(out.sum() - 1) > TOL_DP or out.min() < -TOL_DP:
                raise GameError(f"resolver returned an invalid distribution at step {h}")
            cache[key] = out
        return out

    def cached(self, h: int) -> dict:
        return self._cache[h]

    @classmethod
    def uniform(cls, action_sizes, horizon) -> "JointPolicy":
        return cls(action_sizes, horizon, None, kind="product", provenance={"episode": 0})

    @classmethod
    def from_tables(cls, action_sizes, tables: Sequence[dict], kind="correlated", provenance=None) -> "JointPolicy":
        """Policy backed by explicit per-step ``{obs_key: dist}`` tables."""
        tables = [dict(t) for t in tables]

        def resolve(h, obs):
            return tables[h].get(obs_key(obs))

        return cls(action_sizes, len(tables), resolve, kind=kind, provenance=provenance)

    def tables(self, supports) -> list[np.ndarray]:
        """Dense (S_h, A) tables over the given per-step observation lists."""
        return [np.array([self.dist(h, o) for o in supports[h][0]]) for h in range(self.horizon)]


def product_dist(marginals: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones(1)
    for m in marginals:
        out = np.outer(out, m).ravel()
    return out


def marginals(dist: np.ndarray, action_sizes: Sequence[int]) -> list[np.ndarray]:
    P = np.asarray(dist).reshape(action_sizes)
    axes = range(len(action_sizes))
    return [P.sum(axis=tuple(a for a in axes if a != i)) for i in axes]


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryStep:
    h: int
    obs: object
    latent: int  # simulator-private
    action: int
    rewards: np.ndarray
    next_obs: object


@dataclass
class Trajectory:
    steps: list[TrajectoryStep] = field(default_factory=list)

    def returns(self) -> np.ndarray:
        return np.sum([s.rewards for s in self.steps], axis=0)


def sample_action(policy: JointPolicy, h: int, obs, rng: np.random.Generator) -> int:
    return _sample(policy.dist(h, obs), rng)


def roll_in(env: BlockEnv, policy: JointPolicy, h: int, rng: np.random.Generator):
    """Observation at step ``h`` drawn from the visitation distribution of ``policy``."""
    if not 0 <= h <= env.horizon:
        raise GameError(f"roll-in target step {h} out of range 0..{env.horizon}")
    obs = env.reset(rng)
    for t in range(h):
        obs = env.step(t, obs, sample_action(policy, t, obs, rng), rng)
    return obs


def simulate(env: BlockEnv, policy: JointPolicy, rng: np.random.Generator) -> Trajectory:
    traj = Trajectory()
    obs = env.reset(rng)
    for h in range(env.horizon):
        a = sample_action(policy, h, obs, rng)
        nxt = env.step(h, obs, a, rng)
        traj.steps.append(TrajectoryStep(h, obs, env.decode(h, obs), a, env.reward(h, obs)[:, a].copy(), nxt))
        obs = nxt
    return traj


# ---------------------------------------------------------------------------
# Exact dynamic programming
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Values:
    v: np.ndarray  # (M,) or scalar per player
    V: tuple[np.ndarray, ...]  # per step, (M, S_h) or (S_h,)


def _policy_tables(game: TabularGame, policy) -> list[np.ndarray]:
    if isinstance(policy, JointPolicy):
        raise TypeError("pass dense policy tables; use exploitability() for JointPolicy on a BlockEnv")
    tables = [np.asarray(p, dtype=float) for p in policy]
    if len(tables) != game.horizon:
        raise GameError("policy horizon mismatch")
    for h, p in enumerate(tables):
        if p.shape != (game.n_states(h), game.n_joint):
            raise GameError(f"policy table at step {h} has shape {p.shape}")
    return tables


def value_of_policy(game, policy, transitions=None, rewards=None) -> Values:
    """Exact per-player values of ``policy`` by backward induction.

    ``transitions``/``rewards`` optionally replace the game's own model (same
    shapes as the game arrays); rows may be sub-distributions.
    """
    if transitions is not None or rewards is not None:
        if not isinstance(game, LatentGame):
            raise GameError("model overrides need a LatentGame")
        game = game.as_tabular(transitions, rewards)
    game = _as_tabular(game)
    pis = _policy_tables(game, policy)
    V_next = np.zeros((game.n_players, game.transitions[-1].shape[2]))
    Vs = []
    for h in reversed(range(game.horizon)):
        Q = game.rewards[h] + np.einsum("sat,it->isa", game.transitions[h], V_next)
        V_next = np.einsum("sa,isa->is", pis[h], Q)
        Vs.append(V_next)
    Vs.reverse()
    return Values(Vs[0] @ game.init_dist, tuple(Vs))


def _split_player(x: np.ndarray, sizes: tuple[int, ...], i: int) -> np.ndarray:
    """(S, A) -> (S, A_i, A_{-i}) with player i's action first."""
    S = x.shape[0]
    return np.moveaxis(x.reshape((S,) + sizes), i + 1, 1).reshape(S, sizes[i], -1)


def _deviation_table(game: TabularGame, pi: np.ndarray, Q: np.ndarray, i: int) -> np.ndarray:
    """G[s, a_i, b] = sum_{a_-i} pi(a_i, a_-i | s) Q(s, (b, a_-i))."""
    return np.einsum("sar,sbr->sab", _split_player(pi, game.action_sizes, i), _split_player(Q, game.action_sizes, i))


def best_response_value(game, policy, i: int) -> tuple[float, Values, list[np.ndarray]]:
    """Best-response value of player ``i`` against the others' (conditional) play.

    Returns (v_dagger, value functions, greedy best-response action per state).
    Ties go to the lowest action index.
    """
    game = _as_tabular(game)
    pis = _policy_tables(game, policy)
    V_next = np.zeros(game.transitions[-1].shape[2])
    Vs, greedy = [], []
    for h in reversed(range(game.horizon)):
        Q = game.rewards[h][i] + game.transitions[h] @ V_next
        dev = _deviation_table(game, pis[h], Q, i).sum(axis=1)  # (S, A_i)
        greedy.append(np.argmax(dev, axis=1))
        V_next = dev.max(axis=1)
        Vs.append(V_next)
    Vs.reverse()
    greedy.reverse()
    return float(Vs[0] @ game.init_dist), Values(Vs[0] @ game.init_dist, tuple(Vs)), greedy


def swap_deviation_value(game, policy, i: int) -> tuple[float, Values]:
    """Value of player ``i``'s best strategy modification (state, recommendation) -> action."""
    game = _as_tabular(game)
    pis = _policy_tables(game, policy)
    V_next = np.zeros(game.transitions[-1].shape[2])
    Vs = []
    for h in reversed(range(game.horizon)):
        Q = game.rewards[h][i] + game.transitions[h] @ V_next
        V_next = _deviation_table(game, pis[h], Q, i).max(axis=2).sum(axis=1)
        Vs.append(V_next)
    Vs.reverse()
    return float(Vs[0] @ game.init_dist), Values(Vs[0] @ game.init_dist, tuple(Vs))


def player_gaps(game, policy, concept: str = "cce") -> np.ndarray:
    """Per-player deviation gains (best response for ne/cce, best swap for ce)."""
    if concept not in CONCEPTS:
        raise GameError(f"unknown concept {concept!r}")
    game = _as_tabular(game)
    v = value_of_policy(game, policy).v
    dev = [
        swap_deviation_value(game, policy, i)[0] if concept == "ce" else best_response_value(game, policy, i)[0]
        for i in range(game.n_players)
    ]
    return np.asarray(dev) - v


def exploitability(env, policy, concept: str = "cce") -> float:
    """Max over players of the deviation gain; exact DP with full knowledge of the environment.

    ``env`` is a LatentGame/TabularGame with dense policy tables, or a BlockEnv
    with a JointPolicy (queried at the evaluation support observations).
    """
    if isinstance(env, BlockEnv):
        if isinstance(policy, JointPolicy):
            policy = policy.tables(env.supports)
        game = env.observation_game
    else:
        game = _as_tabular(env)
    # A correlated policy can beat every fixed deviation, so raw gains may be
    # negative; the epsilon of an epsilon-equilibrium is their positive part.
    return max(0.0, float(player_gaps(game, policy, concept).max()))
