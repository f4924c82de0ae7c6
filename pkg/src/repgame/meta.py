"""Outer episode loops: collect, learn a representation, plan, track the gap, return the argmin-gap policy."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .envs import FactoredEnv, identity_block
from .game import CONCEPTS, BlockEnv, GameError, JointPolicy, LatentGame, exploitability, roll_in
from .planner import (VARIANTS, BonusParams, Covariance, PlanResult, ScheduleContext, StageSolver, gap, lsvi_plan,
                      mb_plan)
from .replearn import (ClassConfig, Dataset, FactoredModelClass, FeatureClass, ModelClass, build_discriminators,
                       build_factored_class, build_feature_class, build_model_class, decode, factored_mle_fit,
                       iterative_fit, kronecker_feature, minimax_fit, mle_fit, one_hot_features)

logger = logging.getLogger(__name__)

FIT_MODES = ("minimax", "iterative")


@dataclass(frozen=True)
class RunConfig:
    variant: str = "mf"
    concept: str = "cce"
    episodes: int = 200
    bonus: BonusParams = field(default_factory=BonusParams)
    fit: str = "minimax"
    fit_rounds: int = 10
    replearn_lam: float = 0.01
    eval_every: int = 10  # 0 evaluates only the final policy
    seed: int = 0
    solver_method: str = "lp"
    max_joint_states: int = 4096

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise GameError(f"unknown variant {self.variant!r}")
        if self.concept not in CONCEPTS:
            raise GameError(f"unknown concept {self.concept!r}")
        if self.fit not in FIT_MODES:
            raise GameError(f"unknown fit mode {self.fit!r}")
        if self.episodes < 1:
            raise GameError("episodes must be >= 1")
        if self.replearn_lam <= 0:
            raise GameError("replearn_lam must be positive")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["bonus"] = self.bonus.to_dict()
        return out


@dataclass
class EpisodeRecord:
    n: int
    delta: float
    spread: float
    slack: float
    vbar: np.ndarray
    vlow: np.ndarray
    alpha: float
    zeta: float
    exploit: float | None
    wall_ms: float
    buffer_sizes: tuple[int, int]
    selected: list
    sandwich_violations: int
    simplex_violations: int = 0


@dataclass
class RunResult:
    policy: JointPolicy
    best_n: int
    records: list[EpisodeRecord]
    final_exploit: float
    config: RunConfig

    @property
    def deltas(self) -> np.ndarray:
        return np.array([r.delta for r in self.records])

    @property
    def sandwich_violations(self) -> int:
        return sum(r.sandwich_violations for r in self.records)

    @property
    def simplex_violations(self) -> int:
        return sum(r.simplex_violations for r in self.records)


def collect_triples(env: BlockEnv, policy: JointPolicy, h: int, rng: np.random.Generator) -> tuple[tuple, tuple]:
    """One triple for D_h (roll-in to h) and one for D~_h (roll-in to h-1, two uniform steps).

    At h = 0 there is no earlier step, so s~' is drawn from the initial distribution.
    """
    A = env.n_joint
    s = roll_in(env, policy, h, rng)
    a = int(rng.integers(A))
    s_next = env.step(h, s, a, rng)
    if h == 0:
        s_t = env.reset(rng)
    else:
        s_prev = roll_in(env, policy, h - 1, rng)
        s_t = env.step(h - 1, s_prev, int(rng.integers(A)), rng)
    a_t = int(rng.integers(A))
    return (s, a, s_next), (s_t, a_t, env.step(h, s_t, a_t, rng))


def _should_eval(cfg: RunConfig, n: int) -> bool:
    return n == cfg.episodes or (cfg.eval_every > 0 and n % cfg.eval_every == 0)


def _empirical_init(dataset: Dataset, n_obs: int) -> np.ndarray:
    counts = np.bincount(np.asarray(dataset.initial_observations(), dtype=np.int64), minlength=n_obs)
    return counts / counts.sum()


class _Loop:
    """Shared bookkeeping: collection, gap tracking, argmin selection, evaluation."""

    def __init__(self, env: BlockEnv, cfg: RunConfig, eval_env=None):
        self.env = env
        self.cfg = cfg
        self.eval_env = env if eval_env is None else eval_env
        self.rng = np.random.default_rng([cfg.seed, 17])
        self.dataset = Dataset(env.horizon)
        self.policy = JointPolicy.uniform(env.action_sizes, env.horizon)
        self.records: list[EpisodeRecord] = []
        self.best: tuple[float, int, JointPolicy] | None = None
        self.sandwich_tol = env.n_players * 1e-3 * env.horizon
        self.eval_concept = cfg.concept

    def collect(self) -> None:
        for h in reversed(range(self.env.horizon)):
            self.dataset.add(h, *collect_triples(self.env, self.policy, h, self.rng))

    def finish_episode(self, n: int, plan: PlanResult, g, zeta: float, selected, t0: float, simplex: int = 0):
        exploit = exploitability(self.eval_env, plan.policy, self.eval_concept) if _should_eval(self.cfg, n) else None
        rec = EpisodeRecord(n, g.delta, g.spread, g.slack, np.asarray(plan.vbar), np.asarray(plan.vlow), plan.alpha,
                            zeta, exploit, (time.perf_counter() - t0) * 1e3, self.dataset.sizes(0), selected,
                            plan.sandwich_violations(self.sandwich_tol), simplex)
        self.records.append(rec)
        if self.best is None or g.delta < self.best[0]:
            self.best = (g.delta, n, plan.policy)
        self.policy = plan.policy
        logger.debug("episode %d delta=%.6f exploit=%s", n, g.delta, exploit)

    def result(self) -> RunResult:
        _, best_n, policy = self.best
        rec = self.records[best_n - 1]
        final = rec.exploit if rec.exploit is not None else exploitability(self.eval_env, policy, self.eval_concept)
        return RunResult(policy, best_n, self.records, float(final), self.cfg)


def _check_concept(env: BlockEnv, cfg: RunConfig) -> None:
    # Optimistic slices r_i + b + PV_i add the same bonus to both players, so even a
    # zero-sum game plans on general-sum stage games, where NE is not supported.
    if cfg.concept == "ne":
        raise GameError("concept 'ne' is not supported by the learners because bonus-shifted stage games are "
                        "general-sum; use 'cce' (in two-player zero-sum games its marginals form a Nash equilibrium)")


def _model_based_loop(env: BlockEnv, cfg: RunConfig, fit: Callable, ctx: ScheduleContext, slack_A: int,
                      eval_env=None) -> RunResult:
    """Alg.-1 style loop; ``fit(loop, h, alpha)`` returns (P_hat (S,A,S'), bonus (S,A), selection)."""
    _check_concept(env, cfg)
    if env.obs_mode != "categorical":
        raise GameError("model-based planning enumerates observations; use categorical mode")
    loop = _Loop(env, cfg, eval_env)
    rewards = list(env.observation_game.rewards)
    solver = StageSolver(env.action_sizes, cfg.concept, method=cfg.solver_method)
    for n in range(1, cfg.episodes + 1):
        t0 = time.perf_counter()
        loop.collect()
        alpha = cfg.bonus.alpha(n, ctx)
        zeta = cfg.bonus.zeta(n, ctx)
        Ps, bonuses, selected = [], [], []
        for h in range(env.horizon):
            P, b, sel = fit(loop, h, alpha)
            Ps.append(P)
            bonuses.append(b)
            selected.append(sel)
        init = _empirical_init(loop.dataset, env.n_obs)
        plan = mb_plan(Ps, rewards, bonuses, init, env.action_sizes, cfg.concept, alpha, solver,
                       provenance={"episode": n, "variant": cfg.variant})
        g = gap(plan.vbar, plan.vlow, zeta, env.horizon, slack_A, ctx.variant, env.n_players)
        loop.finish_episode(n, plan, g, zeta, selected, t0)
    return loop.result()


def run_gerl_mb(env: BlockEnv, cfg: RunConfig, model_class: ModelClass | None = None) -> RunResult:
    """Model-based loop: MLE over M_h on D_h + D~_h, elliptical bonus over D_h, planning on the learned model."""
    model_class = model_class or build_model_class(env, ClassConfig(n_perm=1, n_perturb=2, seed=env.seed or 0))
    d = model_class.candidates[0][0].dim
    ctx = ScheduleContext("mb", env.horizon, d, env.n_joint, env.n_players, max(env.action_sizes),
                          max(len(c) for c in model_class.candidates), cfg.episodes, 1, env.n_players)
    lam, H = cfg.bonus.lam, env.horizon

    def fit(loop, h, alpha):
        res = mle_fit(model_class.candidates[h], loop.dataset.combined(h))
        cand = model_class.candidates[h][res.index]
        main = loop.dataset.main[h]
        s = np.fromiter((t[0] for t in main), dtype=np.int64, count=len(main))
        a = np.fromiter((t[1] for t in main), dtype=np.int64, count=len(main))
        cov = Covariance.from_features(cand.phi[s, a], lam)
        S, A, dim = cand.phi.shape
        b = np.minimum(alpha * cov.norms(cand.phi.reshape(-1, dim)), H).reshape(S, A)
        return cand.table, b, res.index

    return _model_based_loop(env, cfg, fit, ctx, env.n_joint)


def factored_kronecker(env: FactoredEnv, cands, i: int, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """phi_bar_{h,i}(s, a): ordered Kronecker product of phi_{h,j}(s[Z_j], a_j) over j in Z_i."""
    acts = env.player_actions(a)
    return kronecker_feature([cands[j].phi[env.neighborhood_index(j, s), acts[:, j]] for j in env.neighborhoods[i]])


def run_gerl_factored(env: FactoredEnv, cfg: RunConfig, model_class: FactoredModelClass | None = None) -> RunResult:
    """Model-based loop with per-factor MLE, Kronecker-feature bonuses summed over players and 2HM sqrt(A~ zeta) slack."""
    S, A = env.n_states, env.n_joint
    if S > cfg.max_joint_states:
        raise GameError(f"{S} joint states exceed the cap {cfg.max_joint_states}; reduce players or local states "
                        f"(joint states = local_states ** players)")
    model_class = model_class or build_factored_class(env, ClassConfig(n_perm=0, reassign_rhos=(), n_perturb=1,
                                                                       seed=env.seed or 0))
    block = env.block
    d = max(c.dim for step in model_class.candidates for cands in step for c in cands)
    ctx = ScheduleContext("factored", env.horizon, d, A, env.n_players, max(env.action_sizes),
                          max(len(c) for step in model_class.candidates for c in step), cfg.episodes, env.L,
                          env.n_players)
    lam, H = cfg.bonus.lam, env.horizon
    s_all = np.repeat(np.arange(S), A)
    a_all = np.tile(np.arange(A), S)

    def fit(loop, h, alpha):
        results, P = factored_mle_fit(model_class.candidates[h], env, loop.dataset.combined(h))
        cands = [model_class.candidates[h][i][r.index] for i, r in enumerate(results)]
        main = loop.dataset.main[h]
        s = np.fromiter((t[0] for t in main), dtype=np.int64, count=len(main))
        a = np.fromiter((t[1] for t in main), dtype=np.int64, count=len(main))
        b = np.zeros(S * A)
        for i in range(env.n_players):
            cov = Covariance.from_features(factored_kronecker(env, cands, i, s, a), lam)
            b += np.minimum(alpha * cov.norms(factored_kronecker(env, cands, i, s_all, a_all)), H)
        return P, b.reshape(S, A), [r.index for r in results]

    return _model_based_loop(block, cfg, fit, ctx, max(env.action_sizes))


class _FeatureCache:
    """Per-step decoded latents of every candidate and discriminator values, grown incrementally."""

    def __init__(self, features: FeatureClass, h: int, rng: np.random.Generator):
        self.features = features
        self.h = h
        self.disc = build_discriminators(features, h, rng)
        self.latents: list[list[np.ndarray]] = [[] for _ in features.decoders[h]]
        self.F_rows: list[np.ndarray] = []
        self.actions: list[int] = []

    def extend(self, triples) -> None:
        new = triples[len(self.actions):]
        if not new:
            return
        obs = [t[0] for t in new]
        for c, dec in enumerate(self.features.decoders[self.h]):
            self.latents[c].append(decode(dec, obs))
        self.F_rows.append(self.disc.evaluate([t[2] for t in new]))
        self.actions.extend(t[1] for t in new)

    def matrices(self):
        acts = np.asarray(self.actions, dtype=np.int64)
        fc = self.features
        X = [one_hot_features(np.concatenate(lat), acts, fc.n_latent, fc.n_joint) for lat in self.latents]
        return X, np.concatenate(self.F_rows)


def _feature_fn(decoder, n_latent: int, n_joint: int):
    def features(obs, actions):
        return one_hot_features(decode(decoder, obs), np.asarray(actions), n_latent, n_joint)

    return features


def run_gerl_mf(env: BlockEnv, cfg: RunConfig, feature_class: FeatureClass | None = None) -> RunResult:
    """Model-free loop: min-max-min feature selection on D_h, LSVI on D_h + D~_h with optimistic/pessimistic targets."""
    _check_concept(env, cfg)
    fc = feature_class or build_feature_class(env, ClassConfig(seed=env.seed or 0))
    ctx = ScheduleContext("mf", env.horizon, fc.dim, env.n_joint, env.n_players, max(env.action_sizes),
                          max(fc.size(h) for h in range(env.horizon)), cfg.episodes, 1, env.n_players)
    loop = _Loop(env, cfg)
    disc_rng = np.random.default_rng([cfg.seed, 29])
    caches = [_FeatureCache(fc, h, disc_rng) for h in range(env.horizon)]
    solver = StageSolver(env.action_sizes, cfg.concept, method=cfg.solver_method)
    for n in range(1, cfg.episodes + 1):
        t0 = time.perf_counter()
        loop.collect()
        alpha = cfg.bonus.alpha(n, ctx)
        zeta = cfg.bonus.zeta(n, ctx)
        feats, selected = [], []
        for h in range(env.horizon):
            cache = caches[h]
            cache.extend(loop.dataset.main[h])
            X, F = cache.matrices()
            if cfg.fit == "minimax":
                idx = minimax_fit(X, F, cfg.replearn_lam).index
            else:
                idx = iterative_fit(X, F, cfg.replearn_lam, cfg.fit_rounds)
            selected.append(idx)
            feats.append(_feature_fn(fc.decoders[h][idx], fc.n_latent, fc.n_joint))
        # Fresh solver cache per episode would waste work: slices are keyed by value, so reuse is exact.
        plan = lsvi_plan(feats, loop.dataset, env.reward, alpha, cfg.bonus.lam, env.action_sizes, cfg.concept,
                         solver=solver, provenance={"episode": n, "variant": "mf"})
        g = gap(plan.vbar, plan.vlow, zeta, env.horizon, env.n_joint, "mf")
        loop.finish_episode(n, plan, g, zeta, selected, t0, plan.extra["simplex_violations"])
    return loop.result()


def run(env, cfg: RunConfig, classes=None) -> RunResult:
    if cfg.variant == "factored":
        if not isinstance(env, FactoredEnv):
            raise GameError("the factored variant needs a factored environment")
        return run_gerl_factored(env, cfg, classes)
    if isinstance(env, FactoredEnv):
        block = env.block
    elif isinstance(env, LatentGame):
        block = identity_block(env)
    else:
        block = env
    if cfg.variant == "mb":
        return run_gerl_mb(block, cfg, classes)
    return run_gerl_mf(block, cfg, classes)
