"""Versioned JSON documents for environments (with their candidate classes) and policies.

Floats are written with ``repr`` precision, so arrays round-trip bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .envs import EnvSpec, FactoredEnv
from .game import BlockEnv, GameError, JointPolicy, LatentGame, obs_key
from .replearn import FactoredModelClass, FeatureClass, ModelClass

ENV_FORMAT = "repgame-env"
POLICY_FORMAT = "repgame-policy"
VERSION = 1


def blob_sha1(data: bytes) -> str:
    """Git-style content hash of a file body."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=None, separators=(",", ":"), allow_nan=False) + "\n"


def _latent_doc(g: LatentGame) -> dict:
    return {"transitions": g.transitions.tolist(), "rewards": g.rewards.tolist(), "init_dist": g.init_dist.tolist()}


def _latent_from(d: dict, action_sizes) -> LatentGame:
    return LatentGame(np.asarray(d["transitions"], dtype=float), np.asarray(d["rewards"], dtype=float),
                      np.asarray(d["init_dist"], dtype=float), tuple(action_sizes))


def env_to_dict(env, spec: EnvSpec | None = None, classes: dict | None = None) -> dict:
    """``classes`` maps 'model' / 'features' / 'factored' to class objects."""
    doc: dict = {"format": ENV_FORMAT, "version": VERSION, "spec": spec.to_dict() if spec else None}
    if isinstance(env, FactoredEnv):
        doc.update(family="factored", seed=env.seed, H=env.horizon, M=env.n_players,
                   action_sizes=list(env.action_sizes), local_states=env.local_states, L=env.L,
                   neighborhoods=[list(nb) for nb in env.neighborhoods],
                   factor_transitions=[t.tolist() for t in env.factor_transitions],
                   rewards=env.rewards.tolist(), init_dist=env.init_dist.tolist())
    elif isinstance(env, BlockEnv):
        lg = env.latent
        doc.update(family="block", seed=env.seed, H=lg.horizon, Z=lg.n_states, M=lg.n_players,
                   action_sizes=list(lg.action_sizes), latent=_latent_doc(lg), obs_mode=env.obs_mode,
                   sigma=env.sigma, eval_samples=env.eval_samples)
        if env.obs_mode == "categorical":
            doc.update(emission=env.emission.tolist(), decoder=env.decoder.tolist())
    elif isinstance(env, LatentGame):
        doc.update(family="tabular", seed=spec.seed if spec else None, H=env.horizon, Z=env.n_states,
                   M=env.n_players, action_sizes=list(env.action_sizes), latent=_latent_doc(env))
    else:
        raise GameError(f"cannot serialize {type(env).__name__}")
    if classes:
        doc["classes"] = {k: v.to_dict() for k, v in classes.items()}
    return doc


_CLASS_TYPES = {"model": ModelClass, "features": FeatureClass, "factored": FactoredModelClass}


def env_from_dict(doc: dict):
    """Returns (env, spec or None, classes dict)."""
    if doc.get("format") != ENV_FORMAT:
        raise GameError("not an environment document")
    if doc.get("version") != VERSION:
        raise GameError(f"unsupported environment version {doc.get('version')}")
    spec = EnvSpec(**doc["spec"]) if doc.get("spec") else None
    sizes = tuple(doc["action_sizes"])
    fam = doc["family"]
    if fam == "factored":
        env = FactoredEnv(tuple(np.asarray(t, dtype=float) for t in doc["factor_transitions"]),
                          tuple(tuple(nb) for nb in doc["neighborhoods"]), int(doc["local_states"]),
                          np.asarray(doc["rewards"], dtype=float), np.asarray(doc["init_dist"], dtype=float),
                          sizes, doc["seed"], int(doc["L"]))
    elif fam == "block":
        lg = _latent_from(doc["latent"], sizes)
        if doc["obs_mode"] == "categorical":
            env = BlockEnv(lg, "categorical", np.asarray(doc["emission"], dtype=float),
                           np.asarray(doc["decoder"], dtype=np.int64), doc["sigma"], doc["seed"], doc["eval_samples"])
        else:
            env = BlockEnv(lg, doc["obs_mode"], sigma=doc["sigma"], seed=doc["seed"], eval_samples=doc["eval_samples"])
    elif fam == "tabular":
        env = _latent_from(doc["latent"], sizes)
    else:
        raise GameError(f"unknown family {fam!r}")
    classes = {k: _CLASS_TYPES[k].from_dict(v) for k, v in (doc.get("classes") or {}).items()}
    return env, spec, classes


def save_env(path, env, spec=None, classes=None) -> str:
    text = dumps(env_to_dict(env, spec, classes))
    Path(path).write_text(text)
    return text


def load_env(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GameError(f"cannot read environment {path}: {exc}") from exc
    return env_from_dict(doc)


def _obs_json(obs):
    return int(obs) if isinstance(obs, (int, np.integer)) else np.asarray(obs, dtype=float).tolist()


def policy_to_dict(policy: JointPolicy, supports, meta: dict | None = None) -> dict:
    """Materialize a policy over per-step observation lists (e.g. an env's evaluation supports)."""
    steps = []
    for h in range(policy.horizon):
        steps.append([{"obs": _obs_json(o), "dist": policy.dist(h, o).tolist()} for o in supports[h][0]])
    return {"format": POLICY_FORMAT, "version": VERSION, "action_sizes": list(policy.action_sizes),
            "horizon": policy.horizon, "kind": policy.kind, "provenance": policy.provenance,
            "meta": meta or {}, "steps": steps}


def policy_from_dict(doc: dict) -> JointPolicy:
    if doc.get("format") != POLICY_FORMAT:
        raise GameError("not a policy document")
    if doc.get("version") != VERSION:
        raise GameError(f"unsupported policy version {doc.get('version')}")
    tables = []
    for step in doc["steps"]:
        table = {}
        for entry in step:
            o = entry["obs"]
            key = obs_key(o if isinstance(o, int) else np.asarray(o, dtype=float))
            table[key] = np.asarray(entry["dist"], dtype=float)
        tables.append(table)
    return JointPolicy.from_tables(doc["action_sizes"], tables, doc.get("kind", "correlated"), doc.get("provenance"))


def load_policy(path) -> JointPolicy:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GameError(f"cannot read policy {path}: {exc}") from exc
    return policy_from_dict(doc)
