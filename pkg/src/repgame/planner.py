"""UCB bonuses, optimistic/pessimistic planning and the optimality gap.

Two planners share one stage-game routine: ``mb_plan`` runs backward induction
on an enumerable learned model, ``lsvi_plan`` runs least-squares value
iteration on learned one-hot features and answers policy queries lazily.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .equilibrium import DEFAULT_EPS, StageGame, solve
from .game import GameError, JointPolicy, obs_key
from .replearn import KernelTransition

SCHEDULES = ("constant", "theory")
VARIANTS = ("mb", "mf", "factored")
REWARD_BOUND = 1.0


class EmptyBufferError(GameError):
    """A step buffer has no data; collect warm-up episodes first."""


# ---------------------------------------------------------------------------
# Covariance and bonuses
# ---------------------------------------------------------------------------

class Covariance:
    """sum phi phi^T + lam I with its inverse kept in sync."""

    def __init__(self, dim: int, lam: float):
        if lam <= 0:
            raise GameError(f"lam must be positive, got {lam}")
        self.lam = float(lam)
        self.matrix = lam * np.eye(dim)
        self._inv = np.eye(dim) / lam

    @classmethod
    def from_features(cls, X: np.ndarray, lam: float) -> "Covariance":
        X = np.asarray(X, dtype=float)
        cov = cls(X.shape[1], lam)
        if X.shape[0]:
            cov.matrix = cov.matrix + X.T @ X
            cov._inv = np.linalg.inv(cov.matrix)
        return cov

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        return self._inv

    def update(self, x: np.ndarray) -> None:
        """Rank-one update via Sherman-Morrison."""
        x = np.asarray(x, dtype=float)
        self.matrix = self.matrix + np.outer(x, x)
        u = self._inv @ x
        self._inv = self._inv - np.outer(u, u) / (1.0 + x @ u)

    def norms(self, X: np.ndarray) -> np.ndarray:
        """||x||_{Sigma^{-1}} for every row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.sqrt(np.maximum(np.einsum("nd,de,ne->n", X, self._inv, X), 0.0))


def bonus(X: np.ndarray, cov: Covariance, alpha: float, H: float) -> np.ndarray:
    """min(alpha ||phi||_{Sigma^{-1}}, H) for every feature row."""
    return np.minimum(alpha * cov.norms(X), H)


def factored_bonus(per_player_X: Sequence[np.ndarray], covs: Sequence[Covariance], alpha: float, H: float) -> np.ndarray:
    """Sum over players of clipped elliptical bonuses on Kronecker features."""
    return sum(bonus(X, c, alpha, H) for X, c in zip(per_player_X, covs))


# ---------------------------------------------------------------------------
# Parameter schedules and the gap
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleContext:
    """Problem sizes the theory schedules depend on."""

    variant: str
    H: int
    d: int
    A: int
    M: int
    A_tilde: int
    class_size: int
    N: int
    L: int = 1
    n_players: int = 2


@dataclass(frozen=True)
class BonusParams:
    """alpha^(n), lam and zeta^(n).

    constant mode: alpha = beta and zeta = c_zeta / n.
    theory mode: the displayed Theta-forms with multiplicative constants c_alpha, c_zeta.
    """

    mode: str = "constant"
    beta: float = 0.1
    lam: float = 1.0
    c_alpha: float = 1.0
    c_zeta: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if self.mode not in SCHEDULES:
            raise GameError(f"unknown schedule mode {self.mode!r}")
        if min(self.beta, self.lam, self.c_alpha, self.c_zeta, self.delta) <= 0:
            raise GameError("bonus parameters must be positive")

    def _log_term(self, ctx: ScheduleContext) -> float:
        if ctx.variant == "mf":
            return math.log(ctx.d * ctx.N * ctx.H * ctx.A * ctx.n_players * ctx.class_size / self.delta)
        if ctx.variant == "factored":
            return math.log(ctx.class_size * ctx.H * ctx.N * ctx.n_players / self.delta)
        return math.log(ctx.class_size * ctx.H * ctx.N / self.delta)

    def alpha(self, n: int, ctx: ScheduleContext) -> float:
        if self.mode == "constant":
            return self.beta
        log = self._log_term(ctx)
        if ctx.variant == "mf":
            return self.c_alpha * ctx.H * ctx.A * ctx.d * math.sqrt(ctx.n_players * log)
        if ctx.variant == "factored":
            return self.c_alpha * ctx.H * ctx.A_tilde * ctx.d ** ctx.L * math.sqrt(ctx.L * log)
        return self.c_alpha * ctx.H * ctx.d * math.sqrt(ctx.A * log)

    def zeta(self, n: int, ctx: ScheduleContext) -> float:
        if n < 1:
            raise GameError("episode index starts at 1")
        if self.mode == "constant":
            return self.c_zeta / n
        log = self._log_term(ctx)
        if ctx.variant == "mf":
            return self.c_zeta * ctx.d ** 2 * ctx.A * log / n
        return self.c_zeta * log / n

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Gap:
    delta: float
    spread: float
    slack: float


def gap(vbar: np.ndarray, vlow: np.ndarray, zeta: float, H: int, A: int, variant: str = "mb",
        n_players: int = 1) -> Gap:
    """max_i (vbar_i - vlow_i) + 2H sqrt(A zeta), or 2HM sqrt(A~ zeta) for the factored variant (A = A~ there)."""
    spread = float(np.max(np.asarray(vbar) - np.asarray(vlow)))
    scale = 2 * H * (n_players if variant == "factored" else 1)
    slack = scale * math.sqrt(A * zeta)
    return Gap(spread + slack, spread, slack)


# ---------------------------------------------------------------------------
# Stage solving with a slice cache
# ---------------------------------------------------------------------------

class StageSolver:
    """Solves per-state stage games, caching by the rounded payoff slice."""

    def __init__(self, action_sizes: Sequence[int], concept: str, eps: float = DEFAULT_EPS, method: str = "lp"):
        self.action_sizes = tuple(action_sizes)
        self.concept = concept
        self.eps = eps
        self.method = method
        self.cache: dict[bytes, np.ndarray] = {}
        self.calls = 0

    def __call__(self, payoffs: np.ndarray) -> np.ndarray:
        """payoffs (M, A) -> joint distribution (A,)."""
        key = np.round(payoffs, 12).tobytes()
        dist = self.cache.get(key)
        if dist is None:
            self.calls += 1
            dist = solve(StageGame.from_flat(payoffs, self.action_sizes), self.concept, self.eps,
                         method=self.method).dist.reshape(-1)
            self.cache[key] = dist
        return dist


@dataclass
class PlanResult:
    """Policy plus optimistic/pessimistic values on the planned states.

    ``Vbar[h]``/``Vlow[h]`` are (M, S_h) over ``states[h]``.
    """

    policy: JointPolicy
    vbar: np.ndarray
    vlow: np.ndarray
    Vbar: list[np.ndarray]
    Vlow: list[np.ndarray]
    states: list[list]
    alpha: float
    stage_solves: int = 0
    extra: dict = field(default_factory=dict)

    def sandwich_violations(self, tol: float) -> int:
        return int(sum(np.sum(lo > hi + tol) for lo, hi in zip(self.Vlow, self.Vbar)))


# ---------------------------------------------------------------------------
# Model-based planning
# ---------------------------------------------------------------------------

def mb_plan(transitions: Sequence[np.ndarray], rewards: Sequence[np.ndarray], bonuses: Sequence[np.ndarray],
            init_weights: np.ndarray, action_sizes: Sequence[int], concept: str = "cce", alpha: float = 0.0,
            solver: StageSolver | None = None, provenance: dict | None = None) -> PlanResult:
    """Equilibrium of {P_h, r + beta} by backward induction, with the r - beta values under the same policy.

    transitions[h]: (S_h, A, S_{h+1}) sub-stochastic; rewards[h]: (M, S_h, A);
    bonuses[h]: (S_h, A); init_weights: distribution over step-0 states.
    """
    H = len(transitions)
    solver = solver or StageSolver(action_sizes, concept)
    M = rewards[0].shape[0]
    S_next = transitions[-1].shape[2]
    Vb, Vl = np.zeros((M, S_next)), np.zeros((M, S_next))
    tables, Vbars, Vlows = [None] * H, [None] * H, [None] * H
    for h in reversed(range(H)):
        P, r, b = transitions[h], rewards[h], bonuses[h]
        if np.any(P.sum(-1) > 1 + 1e-9) or np.any(P < -1e-12):
            raise GameError(f"step {h}: model rows must be sub-distributions")
        Qb = r + b + np.einsum("sat,it->isa", P, Vb)
        Ql = r - b + np.einsum("sat,it->isa", P, Vl)
        pi = np.stack([solver(Qb[:, s, :]) for s in range(P.shape[0])])
        Vb = np.einsum("sa,isa->is", pi, Qb)
        Vl = np.einsum("sa,isa->is", pi, Ql)
        tables[h], Vbars[h], Vlows[h] = pi, Vb, Vl
    w = np.asarray(init_weights, dtype=float)
    policy = JointPolicy.from_tables(action_sizes, [{s: t[s] for s in range(t.shape[0])} for t in tables],
                                     provenance=provenance)
    return PlanResult(policy, Vbars[0] @ w, Vlows[0] @ w, Vbars, Vlows,
                      [list(range(t.shape[0])) for t in tables], alpha, solver.calls, {"tables": tables})


# ---------------------------------------------------------------------------
# Least-squares value iteration
# ---------------------------------------------------------------------------

FeatureFn = Callable[[Sequence, np.ndarray], np.ndarray]  # (obs list, actions) -> (n, d)
RewardFn = Callable[[int, object], np.ndarray]  # (h, obs) -> (M, A)


@dataclass
class LSVIStep:
    """Everything needed to evaluate Q at any observation of one step."""

    features: FeatureFn
    theta_bar: np.ndarray  # (d, M)
    theta_low: np.ndarray  # (d, M)
    bonus_cov: Covariance
    kernel: KernelTransition | None


class LSVIPlanner:
    """Backward LSVI over dataset states; Q-values and policies at other states come from the same formulas."""

    def __init__(self, horizon: int, action_sizes: Sequence[int], reward: RewardFn, alpha: float,
                 concept: str = "cce", solver: StageSolver | None = None):
        self.H = horizon
        self.action_sizes = tuple(action_sizes)
        self.A = int(np.prod(self.action_sizes))
        self.reward = reward
        self.alpha = alpha
        self.clip = horizon * (REWARD_BOUND + 1)
        self.solver = solver or StageSolver(self.action_sizes, concept)
        self.steps: list[LSVIStep | None] = [None] * horizon
        self._memo: list[dict] = [dict() for _ in range(horizon)]

    def q_values(self, h: int, obs) -> tuple[np.ndarray, np.ndarray]:
        """(Qbar, Qlow), each (M, A), at one observation."""
        st = self.steps[h]
        X = st.features([obs] * self.A, np.arange(self.A))
        b = np.minimum(self.alpha * st.bonus_cov.norms(X), self.H)
        r = self.reward(h, obs)
        Qb = np.clip(r + (X @ st.theta_bar).T + b, -self.clip, self.clip)
        Ql = np.clip(r + (X @ st.theta_low).T - b, -self.clip, self.clip)
        return Qb, Ql

    def evaluate(self, h: int, obs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pi, Vbar, Vlow) at one observation; memoized by observation."""
        key = obs_key(obs)
        hit = self._memo[h].get(key)
        if hit is None:
            Qb, Ql = self.q_values(h, obs)
            pi = self.solver(Qb)
            hit = (pi, Qb @ pi, Ql @ pi)
            self._memo[h][key] = hit
        return hit

    def values(self, h: int, obs_list: Sequence) -> tuple[np.ndarray, np.ndarray]:
        """(M, n) optimistic and pessimistic values; step H is terminal (zero)."""
        M = len(self.action_sizes)
        if h == self.H:
            z = np.zeros((M, len(obs_list)))
            return z, z.copy()
        out = [self.evaluate(h, o) for o in obs_list]
        if not out:
            return np.zeros((M, 0)), np.zeros((M, 0))
        return np.stack([o[1] for o in out], axis=1), np.stack([o[2] for o in out], axis=1)

    def fit_step(self, h: int, features: FeatureFn, main: Sequence[tuple], tilde: Sequence[tuple], lam: float,
                 kernel_check: bool = True) -> tuple[LSVIStep, int]:
        """Ridge-regress next-step values onto features; returns (step, simplex violations)."""
        if not main:
            raise EmptyBufferError(f"step {h} buffer is empty; run at least one collection episode first")
        data = list(main) + list(tilde)
        obs = [t[0] for t in data]
        acts = np.fromiter((t[1] for t in data), dtype=np.int64, count=len(data))
        nxt = [t[2] for t in data]
        X = features(obs, acts)
        kernel = KernelTransition(X, nxt, lam)
        violations = kernel.check_simplex() if kernel_check else 0
        Vb_next, Vl_next = self.values(h + 1, nxt)  # (M, n)
        X_main = X[: len(main)]
        self.steps[h] = LSVIStep(features, kernel.apply(Vb_next.T), kernel.apply(Vl_next.T),
                                 Covariance.from_features(X_main, lam), kernel)
        return self.steps[h], violations

    def policy(self, provenance: dict | None = None) -> JointPolicy:
        def resolve(h, obs):
            return self.evaluate(h, obs)[0]

        return JointPolicy(self.action_sizes, self.H, resolve, kind="correlated", provenance=provenance)


def lsvi_plan(features: Sequence[FeatureFn], dataset, reward: RewardFn, alpha: float, lam: float,
              action_sizes: Sequence[int], concept: str = "cce", init_obs: Sequence | None = None,
              solver: StageSolver | None = None, provenance: dict | None = None) -> PlanResult:
    """LSVI with optimistic and pessimistic targets under one shared policy.

    features[h] maps (obs list, joint actions) to one-hot feature rows; the
    dataset supplies D_h and D~_h; values at step 0 are averaged over
    ``init_obs`` (defaults to the step-0 observations in the dataset).
    """
    H = dataset.horizon
    planner = LSVIPlanner(H, action_sizes, reward, alpha, concept, solver)
    violations = []
    states: list[list] = [[] for _ in range(H)]
    for h in reversed(range(H)):
        _, v = planner.fit_step(h, features[h], dataset.main[h], dataset.tilde[h], lam)
        violations.append(v)
        if h + 1 < H:
            states[h + 1] = [t[2] for t in dataset.combined(h)]
    init_obs = list(dataset.initial_observations() if init_obs is None else init_obs)
    states[0] = init_obs
    Vbars, Vlows = zip(*(planner.values(h, states[h]) for h in range(H)))
    vbar, vlow = Vbars[0].mean(axis=1), Vlows[0].mean(axis=1)
    return PlanResult(planner.policy(provenance), vbar, vlow, list(Vbars), list(Vlows), states, alpha,
                      planner.solver.calls, {"simplex_violations": int(sum(violations)), "planner": planner})
