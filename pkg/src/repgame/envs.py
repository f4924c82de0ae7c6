"""Seeded generators for random tabular, block (rich-observation) and factored Markov games."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .game import BlockEnv, GameError, LatentGame

FAMILIES = ("tabular", "block", "factored")
TOPOLOGIES = ("ring", "grid")
REWARD_RANGES = {"-1,1": (-1.0, 1.0), "0,1": (0.0, 1.0)}


@dataclass(frozen=True)
class EnvSpec:
    family: str = "block"
    H: int = 3
    Z: int = 3
    M: int = 2
    actions: int = 3
    k: int = 2  # observations per latent (categorical mode)
    obs_mode: str = "categorical"
    sigma: float = 0.1
    topology: str = "ring"
    L: int = 2
    local_states: int = 2  # per-player local state count (factored)
    zero_sum: bool = False
    reward_range: str = "-1,1"
    eval_samples: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GameError(f"unknown family {self.family!r}")
        if self.topology not in TOPOLOGIES:
            raise GameError(f"unknown topology {self.topology!r}")
        if self.reward_range not in REWARD_RANGES:
            raise GameError(f"reward_range must be one of {sorted(REWARD_RANGES)}")
        for name in ("H", "Z", "M", "actions", "k", "L", "local_states", "eval_samples"):
            if getattr(self, name) < 1:
                raise GameError(f"{name} must be >= 1")
        if self.zero_sum and self.M != 2:
            raise GameError("zero_sum requires exactly two players")

    def to_dict(self) -> dict:
        return asdict(self)


def _simplex_rows(rng: np.random.Generator, shape: tuple[int, ...], n: int) -> np.ndarray:
    """Rows from Uniform(-1, 1) draws, shifted by their minimum when negative, then normalized."""
    x = rng.uniform(-1.0, 1.0, size=shape + (n,))
    low = x.min(axis=-1, keepdims=True)
    x = np.where(low < 0, x - low, x)
    total = x.sum(axis=-1, keepdims=True)
    # Degenerate rows (n == 1 or all-equal draws) become uniform.
    return np.where(total > 0, x / np.where(total > 0, total, 1.0), 1.0 / n)


def _rewards(rng, spec: EnvSpec, shape: tuple[int, ...]) -> np.ndarray:
    lo, hi = REWARD_RANGES[spec.reward_range]
    r = rng.uniform(lo, hi, size=shape)
    if spec.zero_sum:
        r[:, 1] = -r[:, 0]
    return r


def gen_tabular(spec: EnvSpec, rng: np.random.Generator | None = None) -> LatentGame:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    A = spec.actions ** spec.M
    rewards = _rewards(rng, spec, (spec.H, spec.M, spec.Z, A))
    transitions = _simplex_rows(rng, (spec.H, spec.Z, A), spec.Z)
    init = _simplex_rows(rng, (), spec.Z)
    return LatentGame(transitions, rewards, init, (spec.actions,) * spec.M)


def gen_block(spec: EnvSpec, rng: np.random.Generator | None = None) -> BlockEnv:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    latent = gen_tabular(spec, rng)
    if spec.obs_mode == "hadamard":
        return BlockEnv(latent, "hadamard", sigma=spec.sigma, seed=spec.seed, eval_samples=spec.eval_samples)
    if spec.obs_mode != "categorical":
        raise GameError(f"unknown obs_mode {spec.obs_mode!r}")
    Z, k, H = spec.Z, spec.k, spec.H
    O = Z * k
    emission = np.zeros((H + 1, Z, O))
    decoder = np.zeros((H + 1, O), dtype=np.int64)
    for h in range(H + 1):
        perm = rng.permutation(O)
        for z in range(Z):
            ids = perm[z * k:(z + 1) * k]
            emission[h, z, ids] = 1.0 / k
            decoder[h, ids] = z
    return BlockEnv(latent, "categorical", emission, decoder, seed=spec.seed)


def neighborhoods(M: int, L: int, topology: str = "ring") -> tuple[tuple[int, ...], ...]:
    """Neighborhood sets Z_i (ascending, always containing i) with |Z_i| <= L."""
    out = []
    if topology == "ring":
        for i in range(M):
            nb = {i}
            step = 1
            while len(nb) < min(L, M):
                nb.add((i - step) % M)
                if len(nb) < min(L, M):
                    nb.add((i + step) % M)
                step += 1
            out.append(tuple(sorted(nb)))
    elif topology == "grid":
        cols = int(np.ceil(np.sqrt(M)))
        for i in range(M):
            r, c = divmod(i, cols)
            nb = [i]
            for dr, dc in ((0, -1), (-1, 0), (0, 1), (1, 0)):
                rr, cc = r + dr, c + dc
                j = rr * cols + cc
                if len(nb) < L and 0 <= cc < cols and 0 <= rr and j < M:
                    nb.append(j)
            out.append(tuple(sorted(nb)))
    else:
        raise GameError(f"unknown topology {topology!r}")
    return tuple(out)


@dataclass(frozen=True, eq=False)
class FactoredEnv:
    """Per-player local states; player i's next local state depends on s[Z_i] and a_i only.

    ``factor_transitions[i]`` has shape (H, S_loc**|Z_i|, A_i, S_loc). Joint
    states are observed directly: ``block`` is the joint game with identity
    emissions, so joint-state index == observation.
    """

    factor_transitions: tuple[np.ndarray, ...]
    neighborhoods: tuple[tuple[int, ...], ...]
    local_states: int
    rewards: np.ndarray  # (H, M, S, A)
    init_dist: np.ndarray  # (S,)
    action_sizes: tuple[int, ...]
    seed: int | None = None
    L: int = field(default=0)

    def __post_init__(self):
        M = len(self.action_sizes)
        L = self.L or max(len(nb) for nb in self.neighborhoods)
        object.__setattr__(self, "L", L)
        if len(self.neighborhoods) != M or len(self.factor_transitions) != M:
            raise GameError("one neighborhood and factor table per player required")
        for i, nb in enumerate(self.neighborhoods):
            if i not in nb:
                raise GameError(f"player {i} must belong to its own neighborhood")
            if len(nb) > L:
                raise GameError(f"neighborhood of player {i} exceeds L={L}")
            shape = (self.horizon, self.local_states ** len(nb), self.action_sizes[i], self.local_states)
            if self.factor_transitions[i].shape != shape:
                raise GameError(f"factor table {i} has shape {self.factor_transitions[i].shape}, expected {shape}")

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_players(self) -> int:
        return len(self.action_sizes)

    @property
    def n_states(self) -> int:
        return self.local_states ** self.n_players

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.action_sizes))

    def local(self, s: int | np.ndarray) -> np.ndarray:
        """Joint state index -> (..., M) local states."""
        return np.stack(np.unravel_index(s, (self.local_states,) * self.n_players), axis=-1)

    def neighborhood_index(self, i: int, s) -> np.ndarray:
        loc = self.local(np.asarray(s))
        sub = loc[..., list(self.neighborhoods[i])]
        return np.ravel_multi_index(tuple(np.moveaxis(sub, -1, 0)), (self.local_states,) * len(self.neighborhoods[i]))

    def player_actions(self, a) -> np.ndarray:
        """Joint action index -> (..., M) per-player actions."""
        return np.stack(np.unravel_index(a, self.action_sizes), axis=-1)

    def joint_transitions(self, factor_transitions=None) -> np.ndarray:
        """Explicit (H, S, A, S) product expansion of the factor tables."""
        tables = self.factor_transitions if factor_transitions is None else factor_transitions
        S, A = self.n_states, self.n_joint
        s_all = np.arange(S)
        acts = self.player_actions(np.arange(A))  # (A, M)
        loc_next = self.local(s_all)  # (S', M)
        out = np.ones((self.horizon, S, A, S))
        for i in range(self.n_players):
            nb_idx = self.neighborhood_index(i, s_all)  # (S,)
            T = tables[i][:, nb_idx][:, :, acts[:, i]]  # (H, S, A, S_loc)
            out *= T[..., loc_next[:, i]]
        return out

    @cached_property
    def latent(self) -> LatentGame:
        return LatentGame(self.joint_transitions(), self.rewards, self.init_dist, self.action_sizes)

    @cached_property
    def block(self) -> BlockEnv:
        return identity_block(self.latent, self.seed)


def identity_block(latent: LatentGame, seed: int | None = None) -> BlockEnv:
    """Block env whose observation is the latent state itself."""
    S, H = latent.n_states, latent.horizon
    eye = np.broadcast_to(np.eye(S), (H + 1, S, S)).copy()
    dec = np.broadcast_to(np.arange(S), (H + 1, S)).copy()
    return BlockEnv(latent, "categorical", eye, dec, seed=seed)


def gen_factored(spec: EnvSpec, rng: np.random.Generator | None = None) -> FactoredEnv:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    nbs = neighborhoods(spec.M, spec.L, spec.topology)
    S = spec.local_states ** spec.M
    A = spec.actions ** spec.M
    rewards = _rewards(rng, spec, (spec.H, spec.M, S, A))
    tables = tuple(
        _simplex_rows(rng, (spec.H, spec.local_states ** len(nb), spec.actions), spec.local_states) for nb in nbs
    )
    init = _simplex_rows(rng, (), S)
    return FactoredEnv(tables, nbs, spec.local_states, rewards, init, (spec.actions,) * spec.M, spec.seed, spec.L)


def generate(spec: EnvSpec):
    if spec.family == "tabular":
        return gen_tabular(spec)
    if spec.family == "block":
        return gen_block(spec)
    return gen_factored(spec)
