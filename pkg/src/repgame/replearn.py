"""Representation learning over finite candidate classes.

Model-based: maximum likelihood over (phi, w) pairs. Model-free: the
min-max-min ridge objective over one-hot decoder features against a finite
discriminator class, its alternating practical variant, and the ridge-kernel
(non-parametric) transition estimate those features induce.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property, reduce
from typing import Sequence

import numpy as np

from .game import TOL_DP, BlockEnv, GameError, obs_key

logger = logging.getLogger(__name__)

MAX_FEATURE_DIM = 512


class NotRealizableError(GameError):
    """Every candidate assigns zero likelihood to some observed triple."""


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

class Dataset:
    """Per-step buffers D_h and D~_h of (obs, joint action, next obs) triples."""

    def __init__(self, horizon: int):
        self.horizon = horizon
        self.main: list[list[tuple]] = [[] for _ in range(horizon)]
        self.tilde: list[list[tuple]] = [[] for _ in range(horizon)]

    def add(self, h: int, triple: tuple, tilde_triple: tuple) -> None:
        self.main[h].append(triple)
        self.tilde[h].append(tilde_triple)

    def sizes(self, h: int) -> tuple[int, int]:
        return len(self.main[h]), len(self.tilde[h])

    def combined(self, h: int) -> list[tuple]:
        """D_h followed by D~_h."""
        return self.main[h] + self.tilde[h]

    def initial_observations(self) -> list:
        """Step-0 observations drawn from the initial distribution (both buffers)."""
        return [t[0] for t in self.main[0]] + [t[0] for t in self.tilde[0]]


def unpack(triples: Sequence[tuple]):
    obs = [t[0] for t in triples]
    actions = np.fromiter((t[1] for t in triples), dtype=np.int64, count=len(triples))
    nxt = [t[2] for t in triples]
    return obs, actions, nxt


def stack_obs(obs: Sequence) -> np.ndarray:
    if len(obs) and not isinstance(obs[0], (int, np.integer)):
        return np.asarray(obs, dtype=float).reshape(len(obs), -1)
    return np.asarray(obs, dtype=np.int64)


# ---------------------------------------------------------------------------
# Decoders and one-hot features
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TableDecoder:
    """Decoder for categorical observations: a lookup table obs -> latent."""

    table: np.ndarray
    n_latent: int
    label: str = "truth"

    def __call__(self, obs) -> np.ndarray:
        return self.table[np.asarray(obs, dtype=np.int64)]

    def to_dict(self) -> dict:
        return {"type": "table", "table": self.table.tolist(), "n_latent": self.n_latent, "label": self.label}


@dataclass(frozen=True, eq=False)
class HadamardDecoder:
    """Decoder for Hadamard observations: argmax of the latent block after un-mixing.

    ``bias`` shifts the latent scores (mislabelling a band of noisy
    observations) and ``mapping`` relabels the result.
    """

    dim: int
    n_latent: int
    mapping: np.ndarray
    bias: np.ndarray
    label: str = "truth"

    @cached_property
    def _unmix(self) -> np.ndarray:
        from .game import sylvester_hadamard

        return sylvester_hadamard(self.dim)[:, : self.n_latent] / self.dim

    def __call__(self, obs) -> np.ndarray:
        X = np.asarray(obs, dtype=float).reshape(-1, self.dim)
        return self.mapping[np.argmax(X @ self._unmix + self.bias, axis=1)]

    def to_dict(self) -> dict:
        return {"type": "hadamard", "dim": self.dim, "n_latent": self.n_latent, "mapping": self.mapping.tolist(),
                "bias": self.bias.tolist(), "label": self.label}


def decoder_from_dict(d: dict):
    if d["type"] == "table":
        return TableDecoder(np.asarray(d["table"], dtype=np.int64), int(d["n_latent"]), d.get("label", ""))
    if d["type"] == "hadamard":
        return HadamardDecoder(int(d["dim"]), int(d["n_latent"]), np.asarray(d["mapping"], dtype=np.int64),
                               np.asarray(d["bias"], dtype=float), d.get("label", ""))
    raise GameError(f"unknown decoder type {d['type']!r}")


def decode(decoder, obs: Sequence) -> np.ndarray:
    if len(obs) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.asarray(decoder(stack_obs(obs)), dtype=np.int64)


def one_hot_features(latents: np.ndarray, actions: np.ndarray, n_latent: int, n_joint: int) -> np.ndarray:
    """Rows e_{(z, a)} in R^{Z*A}."""
    X = np.zeros((latents.size, n_latent * n_joint))
    X[np.arange(latents.size), latents * n_joint + actions] = 1.0
    return X


@dataclass
class FeatureClass:
    """Model-free classes Phi_h as candidate decoders, for steps 0..H (step H feeds discriminators only)."""

    decoders: list[list]
    n_latent: int
    n_joint: int

    @property
    def dim(self) -> int:
        return self.n_latent * self.n_joint

    def size(self, h: int) -> int:
        return len(self.decoders[h])

    def features(self, h: int, c: int, obs: Sequence, actions: np.ndarray) -> np.ndarray:
        return one_hot_features(decode(self.decoders[h][c], obs), np.asarray(actions), self.n_latent, self.n_joint)

    def to_dict(self) -> dict:
        return {"n_latent": self.n_latent, "n_joint": self.n_joint,
                "decoders": [[d.to_dict() for d in step] for step in self.decoders]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureClass":
        return cls([[decoder_from_dict(x) for x in step] for step in d["decoders"]], int(d["n_latent"]), int(d["n_joint"]))


# ---------------------------------------------------------------------------
# Model-based candidates
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelCandidate:
    """A (phi, w) pair: phi (S, A, d) features, w (S', d) so that P(s'|s,a) = phi(s,a) . w(s').

    Built from latent-form parameters (input decoder, latent transition,
    next-step decoder and emission weights) when ``params`` is set.
    """

    phi: np.ndarray
    w: np.ndarray
    label: str = ""
    params: dict | None = None

    def __post_init__(self):
        phi, w = np.asarray(self.phi, dtype=float), np.asarray(self.w, dtype=float)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "w", w)
        d = phi.shape[-1]
        if w.shape[-1] != d:
            raise GameError("phi and w dimensions differ")
        if np.linalg.norm(phi, axis=-1).max() > 1 + TOL_DP:
            raise GameError(f"candidate {self.label!r}: ||phi|| exceeds 1")
        if np.linalg.norm(w, axis=-1).max() > np.sqrt(d) + TOL_DP:
            raise GameError(f"candidate {self.label!r}: ||w|| exceeds sqrt(d)")
        if np.abs(self.table.sum(-1) - 1).max() > 1e-9:
            raise GameError(f"candidate {self.label!r}: transition rows do not integrate to one")

    @cached_property
    def table(self) -> np.ndarray:
        """Dense (S, A, S') transition table phi . w."""
        return self.phi @ self.w.T

    @property
    def dim(self) -> int:
        return self.phi.shape[-1]

    @classmethod
    def from_latent(cls, decoder: np.ndarray, transition: np.ndarray, next_decoder: np.ndarray,
                    next_weight: np.ndarray, label: str = "") -> "ModelCandidate":
        decoder = np.asarray(decoder, dtype=np.int64)
        next_decoder = np.asarray(next_decoder, dtype=np.int64)
        transition = np.asarray(transition, dtype=float)
        next_weight = np.asarray(next_weight, dtype=float)
        Zin, A, _ = transition.shape
        S = decoder.size
        phi = np.zeros((S, A, Zin * A))
        for s in range(S):
            phi[s, np.arange(A), decoder[s] * A + np.arange(A)] = 1.0
        # w(s')[(z, a)] = o(s') T(z'(s') | z, a)
        w = (transition[:, :, next_decoder] * next_weight).reshape(Zin * A, -1).T
        params = {"decoder": decoder.tolist(), "transition": transition.tolist(),
                  "next_decoder": next_decoder.tolist(), "next_weight": next_weight.tolist()}
        return cls(phi, w, label, params)

    def to_dict(self) -> dict:
        if self.params is not None:
            return {"form": "latent", "label": self.label, **self.params}
        return {"form": "dense", "label": self.label, "phi": self.phi.tolist(), "w": self.w.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCandidate":
        if d["form"] == "latent":
            return cls.from_latent(d["decoder"], d["transition"], d["next_decoder"], d["next_weight"], d.get("label", ""))
        return cls(np.asarray(d["phi"]), np.asarray(d["w"]), d.get("label", ""))


@dataclass
class ModelClass:
    """Per-step finite lists of model candidates M_h."""

    candidates: list[list[ModelCandidate]]

    def to_dict(self) -> dict:
        return {"candidates": [[c.to_dict() for c in step] for step in self.candidates]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelClass":
        return cls([[ModelCandidate.from_dict(c) for c in step] for step in d["candidates"]])


@dataclass
class FactoredModelClass:
    """Per-step, per-player candidate lists M_{h,i} over local inputs (s[Z_i], a_i) -> s_i'."""

    candidates: list[list[list[ModelCandidate]]]  # [h][i][c]

    def to_dict(self) -> dict:
        return {"candidates": [[[c.to_dict() for c in cands] for cands in step] for step in self.candidates]}

    @classmethod
    def from_dict(cls, d: dict) -> "FactoredModelClass":
        return cls([[[ModelCandidate.from_dict(c) for c in cands] for cands in step] for step in d["candidates"]])


# ---------------------------------------------------------------------------
# Maximum likelihood
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLEResult:
    index: int
    loglik: np.ndarray  # mean log-likelihood per candidate (-inf when excluded)

    @property
    def best(self) -> float:
        return float(self.loglik[self.index])


def _loglik(tables: Sequence[np.ndarray], s: np.ndarray, a: np.ndarray, s_next: np.ndarray, triples):
    ll = np.empty(len(tables))
    zero_everywhere = np.ones(s.size, dtype=bool)
    for c, P in enumerate(tables):
        p = P[s, a, s_next]
        positive = p > 0
        zero_everywhere &= ~positive
        ll[c] = np.log(p).mean() if positive.all() else -np.inf
    if not np.isfinite(ll).any():
        bad = int(np.argmax(zero_everywhere)) if zero_everywhere.any() else 0
        raise NotRealizableError(f"every candidate assigns zero likelihood; e.g. triple {triples[bad]!r}")
    return ll


def mle_fit(candidates: Sequence[ModelCandidate], triples: Sequence[tuple]) -> MLEResult:
    """Candidate maximizing the empirical mean log-likelihood (lowest index on ties)."""
    if not triples:
        raise GameError("mle_fit needs at least one triple")
    s, a, s_next = (np.asarray(x, dtype=np.int64) for x in unpack(triples))
    with np.errstate(divide="ignore"):
        ll = _loglik([c.table for c in candidates], s, a, s_next, triples)
    return MLEResult(int(np.argmax(ll)), ll)


def factored_mle_fit(candidates: Sequence[Sequence[ModelCandidate]], env, triples: Sequence[tuple]):
    """Independent per-player MLE over local inputs; returns (per-player results, joint (S, A, S') table)."""
    if not triples:
        raise GameError("factored_mle_fit needs at least one triple")
    s, a, s_next = (np.asarray(x, dtype=np.int64) for x in unpack(triples))
    acts = env.player_actions(a)
    loc_next = env.local(s_next)
    results = []
    for i, cands in enumerate(candidates):
        x = env.neighborhood_index(i, s)
        with np.errstate(divide="ignore"):
            ll = _loglik([c.table for c in cands], x, acts[:, i], loc_next[:, i], triples)
        results.append(MLEResult(int(np.argmax(ll)), ll))
    tables = [cands[r.index].table for cands, r in zip(candidates, results)]
    return results, factored_joint_table(env, tables)


def factored_joint_table(env, factor_tables: Sequence[np.ndarray]) -> np.ndarray:
    """Product expansion prod_i P_i(s_i' | s[Z_i], a_i) as an (S, A, S') table."""
    S, A = env.n_states, env.n_joint
    s_all = np.arange(S)
    acts = env.player_actions(np.arange(A))
    loc_next = env.local(s_all)
    out = np.ones((S, A, S))
    for i, T in enumerate(factor_tables):
        T_i = T[env.neighborhood_index(i, s_all)][:, acts[:, i]]  # (S, A, S_loc)
        out *= T_i[..., loc_next[:, i]]
    return out


def kronecker_feature(factors: Sequence[np.ndarray]) -> np.ndarray:
    """Ordered Kronecker product of factor features; rows are batched when inputs are 2-D."""
    factors = [np.asarray(f, dtype=float) for f in factors]
    if factors[0].ndim == 1:
        return reduce(np.kron, factors)
    n = factors[0].shape[0]
    return reduce(lambda x, y: (x[:, :, None] * y[:, None, :]).reshape(n, -1), factors)


def tv_error(candidate: ModelCandidate, true_table: np.ndarray, state_weights: np.ndarray) -> float:
    """Mean TV distance to the truth over s ~ state_weights, a ~ uniform."""
    tv = 0.5 * np.abs(candidate.table - true_table).sum(-1)  # (S, A)
    return float(state_weights @ tv.mean(axis=1) / state_weights.sum())


# ---------------------------------------------------------------------------
# Model-free: ridge objective, discriminators, min-max-min
# ---------------------------------------------------------------------------

def ridge_losses(X: np.ndarray, F: np.ndarray, lam: float) -> np.ndarray:
    """min_theta E_D[(x . theta - f)^2] + lam ||theta||^2 for every column f of F, in closed form."""
    if lam <= 0:
        raise GameError(f"ridge regularization must be positive, got lam={lam}")
    n, d = X.shape
    if d > MAX_FEATURE_DIM:
        raise GameError(f"feature dimension {d} exceeds cap {MAX_FEATURE_DIM}")
    G = X.T @ X / n + lam * np.eye(d)
    try:
        theta = np.linalg.solve(G, X.T @ F / n)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - lam > 0 makes G positive definite
        raise GameError(f"singular ridge system with lam={lam}") from exc
    resid = X @ theta - F
    return (resid ** 2).mean(axis=0) + lam * (theta ** 2).sum(axis=0)


@dataclass
class DiscriminatorClass:
    """Finite functions f: step-(h+1) observations -> [0, 1].

    Two families: latent indicators 1[psi(s) = z] for every candidate decoder,
    and pairwise witnesses mean_a |theta[psi(s), a] - theta'[psi'(s), a]| with
    theta drawn from a coarse grid.
    """

    decoders: list  # step-(h+1) candidate decoders
    thetas: np.ndarray  # (G, Z, A) grid points with entries in {0, 1/2, 1}
    n_latent: int

    @property
    def size(self) -> int:
        C, G = len(self.decoders), self.thetas.shape[0]
        return C * self.n_latent + C * (C - 1) * G * G

    def evaluate(self, obs: Sequence) -> np.ndarray:
        """(n, |F|) matrix of discriminator values."""
        lat = np.stack([decode(d, obs) for d in self.decoders]) if len(obs) else np.zeros((len(self.decoders), 0), int)
        cols = [(row == z).astype(float) for row in lat for z in range(self.n_latent)]
        C, G = len(self.decoders), self.thetas.shape[0]
        for c in range(C):
            for c2 in range(C):
                if c == c2:
                    continue
                for g in range(G):
                    left = self.thetas[g][lat[c]]  # (n, A)
                    for g2 in range(G):
                        cols.append(np.abs(left - self.thetas[g2][lat[c2]]).mean(axis=1))
        return np.clip(np.stack(cols, axis=1), 0.0, 1.0) if cols else np.zeros((len(obs), 0))


def build_discriminators(features: FeatureClass, h: int, rng: np.random.Generator, n_theta: int = 2) -> DiscriminatorClass:
    thetas = rng.integers(0, 3, size=(n_theta, features.n_latent, features.n_joint)) / 2.0
    return DiscriminatorClass(list(features.decoders[h + 1]), thetas, features.n_latent)


@dataclass(frozen=True)
class MinimaxResult:
    index: int
    objective: np.ndarray  # max_f excess loss per candidate
    losses: np.ndarray  # (|Phi|, |F|) min_theta losses

    @property
    def value(self) -> float:
        return float(self.objective[self.index])


def _argmin_lowest(values: np.ndarray, tol: float = 1e-12) -> int:
    return int(np.flatnonzero(values <= values.min() + tol)[0])


def loss_matrix(feature_mats: Sequence[np.ndarray], F: np.ndarray, lam: float) -> np.ndarray:
    return np.stack([ridge_losses(X, F, lam) for X in feature_mats])


def minimax_fit(feature_mats: Sequence[np.ndarray], F: np.ndarray, lam: float) -> MinimaxResult:
    """argmin_phi max_f [min_theta L(phi, theta, f) - min_{phi~, theta~} L(phi~, theta~, f)] by enumeration.

    feature_mats[c] is the (n, d) feature matrix of candidate c on the data; F
    holds the discriminator values at the next observations.
    """
    losses = loss_matrix(feature_mats, F, lam)
    if losses.shape[1] == 0:
        return MinimaxResult(0, np.zeros(len(feature_mats)), losses)
    excess = losses - losses.min(axis=0, keepdims=True)
    objective = excess.max(axis=1)
    return MinimaxResult(_argmin_lowest(objective), objective, losses)


def iterative_fit(feature_mats: Sequence[np.ndarray], F: np.ndarray, lam: float, T: int = 10, start: int = 0) -> int:
    """Alternating discriminator selection / feature selection for T rounds; returns the final feature index."""
    if T < 1:
        raise GameError("iterative_fit needs T >= 1")
    losses = loss_matrix(feature_mats, F, lam)
    if losses.shape[1] == 0:
        return start
    excess = losses - losses.min(axis=0, keepdims=True)
    current = start
    chosen: list[int] = []
    for _ in range(T + 1):
        chosen.append(int(np.argmax(excess[current])))
        current = _argmin_lowest(losses[:, chosen].sum(axis=1))
    return current


# ---------------------------------------------------------------------------
# Non-parametric (ridge-kernel) transition
# ---------------------------------------------------------------------------

class KernelTransition:
    """P(s'|s,a) = phi(s,a)^T (sum phi phi^T + lam I)^{-1} sum phi 1[s~' = s'] over dataset atoms.

    ``apply(f)`` returns the ridge weights theta such that (P f)(s, a) = phi(s, a) . theta.
    """

    def __init__(self, X: np.ndarray, next_obs: Sequence, lam: float):
        if lam <= 0:
            raise GameError(f"ridge regularization must be positive, got lam={lam}")
        self.X = np.asarray(X, dtype=float)
        self.lam = float(lam)
        d = self.X.shape[1]
        self.Lambda = self.X.T @ self.X + lam * np.eye(d)
        self.Lambda_inv = np.linalg.inv(self.Lambda)
        self.next_obs = list(next_obs)
        keys: dict = {}
        self.atom_index = np.fromiter((keys.setdefault(obs_key(o), len(keys)) for o in self.next_obs),
                                      dtype=np.int64, count=len(self.next_obs))
        self.atoms = list({k: None for k in keys})
        self._K = self.Lambda_inv @ self.X.T  # (d, n)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """theta = Lambda^{-1} sum phi f(s~'), for f given at each dataset next-observation."""
        if self.X.shape[0] == 0:
            return np.zeros((self.dim,) + np.shape(values)[1:])
        return self._K @ np.asarray(values, dtype=float)

    def conditional(self, x: np.ndarray) -> np.ndarray:
        """Probabilities over distinct next-observation atoms for feature rows x (m, d)."""
        weights = np.atleast_2d(x) @ self._K  # (m, n)
        out = np.zeros((weights.shape[0], len(self.atoms)))
        np.add.at(out.T, self.atom_index, weights.T)
        return out

    def basis_conditionals(self) -> np.ndarray:
        """Conditionals for every one-hot feature e_j (d, n_atoms)."""
        return self.conditional(np.eye(self.dim))

    def check_simplex(self, tol_neg: float = 1e-12, tol_mass: float = 1e-9) -> int:
        """Number of one-hot conditionals violating entrywise >= 0 or total mass <= 1."""
        P = self.basis_conditionals()
        bad = (P < -tol_neg).any(axis=1) | (P.sum(axis=1) > 1 + tol_mass)
        return int(bad.sum())


def nonparametric_transition(X: np.ndarray, next_obs: Sequence, lam: float) -> KernelTransition:
    return KernelTransition(X, next_obs, lam)


# ---------------------------------------------------------------------------
# Candidate-class generation (truth always included)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassConfig:
    n_perm: int = 1
    reassign_rhos: tuple[float, ...] = (0.1, 0.3)
    n_reassign: int = 2  # per rho
    n_perturb: int = 0
    perturb_scales: tuple[float, ...] = (0.05, 0.2)
    n_theta: int = 2
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


def _perm_decoy(rng, Z):
    if Z < 2:
        return np.arange(Z)
    while True:
        p = rng.permutation(Z)
        if np.any(p != np.arange(Z)):
            return p


def _reassign_table(rng, table: np.ndarray, Z: int, rho: float) -> np.ndarray:
    out = table.copy()
    if Z < 2:
        return out
    n = max(1, int(round(rho * table.size)))
    idx = rng.choice(table.size, size=n, replace=False)
    out[idx] = (table[idx] + rng.integers(1, Z, size=n)) % Z
    return out


def _insert_truth(rng, decoys: list, truth) -> list:
    pos = int(rng.integers(0, len(decoys) + 1))
    return decoys[:pos] + [truth] + decoys[pos:]


def _hadamard_bias(rho: float, sigma: float) -> float:
    # Score margin between the true latent and a competitor is ~N(1, 2 sigma^2);
    # a bias b on the competitor mislabels a fraction rho of the true latent's observations.
    from scipy.stats import norm

    return float(1.0 + np.sqrt(2.0) * sigma * norm.ppf(rho))


def build_feature_class(env: BlockEnv, cfg: ClassConfig = ClassConfig()) -> FeatureClass:
    """Phi_h for steps 0..H: truth, latent relabelings, and decoders that mislabel a fraction rho."""
    rng = np.random.default_rng([cfg.seed, 101])
    Z, A = env.latent.n_states, env.n_joint
    steps = []
    for h in range(env.horizon + 1):
        decoys = []
        if env.obs_mode == "categorical":
            truth = TableDecoder(env.decoder[h].copy(), Z, "truth")
            for j in range(cfg.n_perm):
                decoys.append(TableDecoder(_perm_decoy(rng, Z)[truth.table], Z, f"perm{j}"))
            for rho in cfg.reassign_rhos:
                for j in range(cfg.n_reassign):
                    decoys.append(TableDecoder(_reassign_table(rng, truth.table, Z, rho), Z, f"reassign{rho}_{j}"))
        else:
            ident, zero = np.arange(Z), np.zeros(Z)
            truth = HadamardDecoder(env.obs_dim, Z, ident, zero, "truth")
            for j in range(cfg.n_perm):
                decoys.append(HadamardDecoder(env.obs_dim, Z, _perm_decoy(rng, Z), zero, f"perm{j}"))
            for rho in cfg.reassign_rhos:
                for j in range(cfg.n_reassign):
                    bias = np.zeros(Z)
                    bias[int(rng.integers(Z))] = _hadamard_bias(rho, env.sigma)
                    decoys.append(HadamardDecoder(env.obs_dim, Z, ident, bias, f"reassign{rho}_{j}"))
        steps.append(_insert_truth(rng, decoys, truth))
    return FeatureClass(steps, Z, A)


def _perturb(rng, T: np.ndarray, scale: float) -> np.ndarray:
    """Exponentially tilt each row by Gaussian noise; the support is kept exactly, so KL grows like scale**2."""
    out = T * np.exp(scale * rng.standard_normal(T.shape))
    return out / out.sum(-1, keepdims=True)


def build_model_class(env: BlockEnv, cfg: ClassConfig = ClassConfig(n_perm=1, n_perturb=2)) -> ModelClass:
    """M_h for a categorical block env: truth, swapped/reassigned decoders, perturbed latent transitions."""
    if env.obs_mode != "categorical":
        raise GameError("model-based learning needs finite (categorical) observations")
    rng = np.random.default_rng([cfg.seed, 202])
    Z = env.latent.n_states
    steps = []
    for h in range(env.horizon):
        T = env.latent.transitions[h]
        dec, nd = env.decoder[h], env.decoder[h + 1]
        nw = env.emission[h + 1, nd, np.arange(nd.size)]
        truth = ModelCandidate.from_latent(dec, T, nd, nw, "truth")
        decoys = []
        for j in range(cfg.n_perm):
            decoys.append(ModelCandidate.from_latent(_perm_decoy(rng, Z)[dec], T, nd, nw, f"swap{j}"))
        for rho in cfg.reassign_rhos:
            for j in range(cfg.n_reassign):
                decoys.append(ModelCandidate.from_latent(_reassign_table(rng, dec, Z, rho), T, nd, nw, f"reassign{rho}_{j}"))
        for scale in cfg.perturb_scales:
            for j in range(cfg.n_perturb):
                decoys.append(ModelCandidate.from_latent(dec, _perturb(rng, T, scale), nd, nw, f"perturb{scale}_{j}"))
        steps.append(_insert_truth(rng, decoys, truth))
    return ModelClass(steps)


def build_factored_class(env, cfg: ClassConfig = ClassConfig(n_perm=0, reassign_rhos=(), n_perturb=1)) -> FactoredModelClass:
    """M_{h,i}: per-factor truth plus perturbed factor transitions and shuffled local inputs."""
    rng = np.random.default_rng([cfg.seed, 303])
    steps = []
    S_loc = env.local_states
    ident_next = np.arange(S_loc)
    ones = np.ones(S_loc)
    for h in range(env.horizon):
        per_player = []
        for i in range(env.n_players):
            T = env.factor_transitions[i][h]
            inputs = np.arange(T.shape[0])
            truth = ModelCandidate.from_latent(inputs, T, ident_next, ones, "truth")
            decoys = []
            for j in range(cfg.n_perm):
                decoys.append(ModelCandidate.from_latent(_perm_decoy(rng, inputs.size), T, ident_next, ones, f"shuffle{j}"))
            for scale in cfg.perturb_scales:
                for j in range(cfg.n_perturb):
                    decoys.append(ModelCandidate.from_latent(inputs, _perturb(rng, T, scale), ident_next, ones,
                                                             f"perturb{scale}_{j}"))
            per_player.append(_insert_truth(rng, decoys, truth))
        steps.append(per_player)
    return FactoredModelClass(steps)
