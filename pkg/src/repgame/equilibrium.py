"""Normal-form stage-game equilibrium oracles (zero-sum NE, CCE, CE) and exact deviation gaps."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .game import TOL_DP, TOL_SIMPLEX, GameError, product_dist

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-3
DEFAULT_MAX_ITERS = 200_000
METHODS = ("lp", "dynamics")


class NotZeroSumError(GameError):
    """NE requested for a stage game that is not two-player zero-sum (or constant-sum)."""


@dataclass(frozen=True, eq=False)
class StageGame:
    """Payoff tensors ``payoffs[i]`` of shape ``action_sizes`` for each player."""

    payoffs: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.payoffs, dtype=float)
        if u.ndim < 2 or u.shape[0] != u.ndim - 1:
            raise GameError(f"payoff tensor shape {u.shape} is not (M, A_1, ..., A_M)")
        object.__setattr__(self, "payoffs", u)

    @classmethod
    def from_flat(cls, flat: np.ndarray, action_sizes) -> "StageGame":
        """Build from (M, A) payoffs over flattened joint actions."""
        flat = np.asarray(flat, dtype=float)
        return cls(flat.reshape((flat.shape[0],) + tuple(action_sizes)))

    @property
    def n_players(self) -> int:
        return self.payoffs.shape[0]

    @property
    def action_sizes(self) -> tuple[int, ...]:
        return self.payoffs.shape[1:]

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.action_sizes))

    @property
    def bound(self) -> float:
        return float(np.abs(self.payoffs).max())

    def flat(self) -> np.ndarray:
        return self.payoffs.reshape(self.n_players, -1)

    def is_constant_sum(self) -> bool:
        if self.n_players != 2:
            return False
        s = self.payoffs[0] + self.payoffs[1]
        return float(np.ptp(s)) <= TOL_SIMPLEX * max(1.0, self.bound)

    def __str__(self) -> str:
        lines = [f"StageGame players={self.n_players} actions={self.action_sizes}"]
        for idx in np.ndindex(*self.action_sizes):
            vals = " ".join(f"{self.payoffs[(i,) + idx]: .4f}" for i in range(self.n_players))
            lines.append(f"  {idx}: {vals}")
        return "\n".join(lines)


@dataclass(frozen=True, eq=False)
class StageSolution:
    dist: np.ndarray  # flattened joint distribution
    gaps: np.ndarray  # certified per-player deviation gaps
    iterations: int
    converged: bool
    concept: str
    marginals: tuple[np.ndarray, ...] | None = None  # set for product (NE) solutions

    @property
    def max_gap(self) -> float:
        return float(self.gaps.max())


def _player_view(u_i: np.ndarray, P: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
    """(A_i, A_-i) matrices of the joint distribution and player i's payoff."""
    Pm = np.moveaxis(P, i, 0).reshape(P.shape[i], -1)
    Um = np.moveaxis(u_i, i, 0).reshape(u_i.shape[i], -1)
    return Pm, Um


def deviation_gap(game: StageGame, dist: np.ndarray, concept: str = "cce") -> np.ndarray:
    """Exact per-player gain from the best unilateral (ne/cce) or swap (ce) deviation."""
    if concept not in ("ne", "cce", "ce"):
        raise GameError(f"unknown concept {concept!r}")
    P = np.asarray(dist, dtype=float).reshape(game.action_sizes)
    gaps = np.empty(game.n_players)
    for i in range(game.n_players):
        Pm, Um = _player_view(game.payoffs[i], P, i)
        G = Pm @ Um.T  # G[a, b]: mass recommending a, valued as if b were played
        current = np.trace(G)
        if concept == "ce":
            gaps[i] = G.max(axis=1).sum() - current
        else:
            gaps[i] = G.sum(axis=0).max() - current
    return gaps


def _clean(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def _centered(game: StageGame) -> np.ndarray:
    # Translation-invariant LP input: remove each player's mean, drop float noise.
    u = game.flat()
    return np.round(u - u.mean(axis=1, keepdims=True), 12)


def _correlated_lp(game: StageGame, concept: str) -> np.ndarray:
    u = _centered(game)
    sizes = game.action_sizes
    A = game.n_joint
    rows = []
    idx = np.arange(A).reshape(sizes)
    for i in range(game.n_players):
        ui = u[i].reshape(sizes)
        for b in range(sizes[i]):
            dev = np.take(ui, [b] * sizes[i], axis=i)  # u_i(b, a_-i) broadcast over a_i
            diff = (dev - ui).ravel()
            if concept == "cce":
                rows.append(diff)
            else:
                for a in range(sizes[i]):
                    if a == b:
                        continue
                    mask = np.zeros(A)
                    mask[np.take(idx, a, axis=i).ravel()] = 1.0
                    rows.append(diff * mask)
    res = linprog(-u.sum(axis=0), A_ub=np.array(rows), b_ub=np.zeros(len(rows)),
                  A_eq=np.ones((1, A)), b_eq=[1.0], bounds=(0, None), method="highs")
    if res.status != 0:
        raise GameError(f"equilibrium LP failed: {res.message}")
    return _clean(res.x)


def _minimax_lp(U: np.ndarray) -> np.ndarray:
    """Maximin mixed strategy of the row player of payoff matrix U."""
    n, m = U.shape
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-U.T, np.ones((m, 1))])
    A_eq = np.zeros((1, n + 1))
    A_eq[0, :n] = 1.0
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * n + [(None, None)], method="highs")
    if res.status != 0:
        raise GameError(f"minimax LP failed: {res.message}")
    return _clean(res.x[:n])


def _expected_payoffs(u_i: np.ndarray, strategies: list[np.ndarray], i: int) -> np.ndarray:
    acc = np.moveaxis(u_i, i, 0)
    others = [s for j, s in enumerate(strategies) if j != i]
    for s in reversed(others):
        acc = acc @ s
    return acc


def _regret_to_strategy(r: np.ndarray) -> np.ndarray:
    pos = np.maximum(r, 0.0)
    total = pos.sum()
    return pos / total if total > 0 else np.full(r.size, 1.0 / r.size)


def _stationary(R: np.ndarray) -> np.ndarray:
    """Stationary distribution of the chain induced by positive internal regrets."""
    n = R.shape[0]
    pos = np.maximum(R, 0.0)
    np.fill_diagonal(pos, 0.0)
    norm = pos.sum(axis=1).max()
    if norm <= 0:
        return np.full(n, 1.0 / n)
    Q = pos / norm
    np.fill_diagonal(Q, 1.0 - Q.sum(axis=1))
    # x = x Q with sum(x) = 1
    A = np.vstack([Q.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    return _clean(x)


def _run_dynamics(game: StageGame, concept: str, eps: float, max_iters: int, check_every: int = 250):
    """Regret-matching (cce) or internal-regret-matching (ce) self-play; returns the average joint play."""
    M, sizes = game.n_players, game.action_sizes
    ext = [np.zeros(n) for n in sizes]
    internal = [np.zeros((n, n)) for n in sizes]
    avg = np.zeros(game.n_joint)
    for t in range(1, max_iters + 1):
        if concept == "cce":
            strategies = [_regret_to_strategy(r) for r in ext]
        else:
            strategies = [_stationary(R) for R in internal]
        avg += product_dist(strategies)
        for i in range(M):
            values = _expected_payoffs(game.payoffs[i], strategies, i)
            if concept == "cce":
                ext[i] += values - strategies[i] @ values
            else:
                internal[i] += strategies[i][:, None] * (values[None, :] - values[:, None])
        if t % check_every == 0 or t == max_iters:
            dist = avg / t
            gaps = deviation_gap(game, dist, concept)
            if gaps.max() <= eps:
                return dist, gaps, t, True
    dist = avg / max_iters
    return dist, deviation_gap(game, dist, concept), max_iters, False


def solve_cce(game: StageGame, eps: float = DEFAULT_EPS, max_iters: int = DEFAULT_MAX_ITERS,
              method: str = "lp") -> StageSolution:
    """Coarse correlated equilibrium with certified external-regret gap."""
    return _solve_correlated(game, "cce", eps, max_iters, method)


def solve_ce(game: StageGame, eps: float = DEFAULT_EPS, max_iters: int = DEFAULT_MAX_ITERS,
             method: str = "lp") -> StageSolution:
    """Correlated equilibrium with certified swap-regret gap."""
    return _solve_correlated(game, "ce", eps, max_iters, method)


def _solve_correlated(game, concept, eps, max_iters, method) -> StageSolution:
    if method not in METHODS:
        raise GameError(f"unknown method {method!r}")
    if method == "lp":
        dist = _correlated_lp(game, concept)
        gaps = deviation_gap(game, dist, concept)
        if gaps.max() <= eps:
            return StageSolution(dist, gaps, 1, True, concept)
        logger.warning("%s LP gap %.3g above eps %.3g, falling back to dynamics", concept, gaps.max(), eps)
    dist, gaps, iters, ok = _run_dynamics(game, concept, eps, max_iters)
    return StageSolution(dist, gaps, iters, ok, concept)


def solve_zero_sum_ne(game: StageGame, eps: float = DEFAULT_EPS, max_iters: int = DEFAULT_MAX_ITERS,
                      method: str = "lp") -> StageSolution:
    """Nash equilibrium of a two-player zero-sum (or constant-sum) stage game.

    General-sum inputs are rejected; use solve_cce/solve_ce instead, since
    general-sum Nash computation is PPAD-hard.
    """
    if method not in METHODS:
        raise GameError(f"unknown method {method!r}")
    if not game.is_constant_sum():
        raise NotZeroSumError("NE oracle only supports two-player zero-sum stage games; use the cce or ce concept")
    U = game.payoffs[0]
    if method == "lp":
        x, y = _minimax_lp(U), _minimax_lp(-U.T)
        iters, ok = 1, True
    else:
        x, y, iters, ok = _hedge(U, eps, max_iters)
    dist = product_dist([x, y])
    gap = float((U @ y).max() - (x @ U).min())
    if gap > eps:
        ok = False
    gaps = deviation_gap(game, dist, "ne")
    return StageSolution(dist, gaps, iters, ok, "ne", marginals=(x, y))


def _hedge(U: np.ndarray, eps: float, max_iters: int, check_every: int = 250):
    """Multiplicative-weights self-play; returns averaged iterates."""
    n, m = U.shape
    scale = max(float(np.abs(U).max()), TOL_DP)
    rate = np.sqrt(8 * np.log(max(n, m, 2))) / scale
    lx, ly = np.zeros(n), np.zeros(m)
    sx, sy = np.zeros(n), np.zeros(m)
    for t in range(1, max_iters + 1):
        x = np.exp(lx - lx.max())
        x /= x.sum()
        y = np.exp(ly - ly.max())
        y /= y.sum()
        sx += x
        sy += y
        eta = rate / np.sqrt(t)
        lx += eta * (U @ y)
        ly -= eta * (x @ U)
        if t % check_every == 0 or t == max_iters:
            ax, ay = sx / t, sy / t
            if (U @ ay).max() - (ax @ U).min() <= eps:
                return ax, ay, t, True
    return sx / max_iters, sy / max_iters, max_iters, False


def solve(game: StageGame, concept: str, eps: float = DEFAULT_EPS, max_iters: int = DEFAULT_MAX_ITERS,
          method: str = "lp") -> StageSolution:
    if concept == "ne":
        return solve_zero_sum_ne(game, eps, max_iters, method)
    if concept == "cce":
        return solve_cce(game, eps, max_iters, method)
    if concept == "ce":
        return solve_ce(game, eps, max_iters, method)
    raise GameError(f"unknown concept {concept!r}")
