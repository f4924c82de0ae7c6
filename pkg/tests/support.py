"""Shared test fixtures: fast vectorized sampling of uniform-exploration triples."""
from __future__ import annotations

import numpy as np


def _draw(P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(P.shape[0])
    return (np.cumsum(P, axis=1) < u[:, None]).sum(axis=1).clip(max=P.shape[1] - 1)


def uniform_triples(env, h: int, n: int, rng: np.random.Generator, state_dist=None):
    """n categorical-observation triples at step h: latent ~ state_dist (default d_h under uniform play)."""
    lg = env.latent
    if state_dist is None:
        state_dist = latent_marginal(lg, h)
    z = rng.choice(lg.n_states, size=n, p=state_dist)
    s = _draw(env.emission[h][z], rng)
    a = rng.integers(lg.n_joint, size=n)
    z2 = _draw(lg.transitions[h][z, a], rng)
    s2 = _draw(env.emission[h + 1][z2], rng)
    return list(zip(s.tolist(), a.tolist(), s2.tolist()))


def latent_marginal(lg, h: int) -> np.ndarray:
    d = lg.init_dist
    for t in range(h):
        d = d @ lg.transitions[t].mean(axis=1)
    return d


def obs_marginal(env, h: int) -> np.ndarray:
    d = latent_marginal(env.latent, h)
    return d @ env.emission[h]


# Acceptance-suite report lines, printed again in the terminal summary by conftest.
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line, then assert."""
    line = f"[acceptance {criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
