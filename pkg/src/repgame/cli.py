"""Command-line harness: ``gen``, ``run``, ``eval`` and ``table1``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import tomli

from .envs import EnvSpec, FactoredEnv, generate
from .game import BlockEnv, GameError, exploitability
from .meta import RunConfig, run
from .planner import BonusParams
from .replearn import (ClassConfig, build_factored_class, build_feature_class, build_model_class)
from .serialize import blob_sha1, dumps, load_env, load_policy, policy_to_dict, save_env, sha256

logger = logging.getLogger("repgame")

CSV_DIGITS = 6

# Published final-policy exploitability, mean (std) over 5 seeds, zero-sum block games.
PUBLISHED_TABLE1 = {
    3: ("0.0013 (0.0018)", "0.0032 (0.0032)", "0.0004 (0.0009)"),
    10: ("0.0780 (0.1560)", "0.0070 (0.0160)", "0.0060 (0.0130)"),
}
TABLE1_ENV_SEEDS = (1, 2, 3)
TABLE1_EPISODES = {3: 200, 10: 500}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_seeds(text: str) -> list[int]:
    """'0..4' (inclusive) or '0,3,7'."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad seed list {text!r}") from exc
    if not seeds or len(set(seeds)) != len(seeds):
        raise UsageError("seeds must be non-empty and distinct")
    return seeds


def mean_std(values) -> str:
    v = np.asarray(values, dtype=float)
    return f"{v.mean():.4f} ({v.std():.4f})"


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def default_classes(env, seed: int) -> dict:
    if isinstance(env, FactoredEnv):
        return {"factored": build_factored_class(env, ClassConfig(n_perm=0, reassign_rhos=(), n_perturb=1, seed=seed))}
    if isinstance(env, BlockEnv):
        out = {"features": build_feature_class(env, ClassConfig(seed=seed))}
        if env.obs_mode == "categorical":
            out["model"] = build_model_class(env, ClassConfig(n_perm=1, n_perturb=2, seed=seed))
        return out
    return {}


def spec_from_args(a) -> EnvSpec:
    return EnvSpec(family=a.family, H=a.H, Z=a.Z, M=a.players, actions=a.actions, k=a.k, obs_mode=a.obs_mode,
                   sigma=a.sigma, topology=a.topology, L=a.L, local_states=a.local_states, zero_sum=a.zero_sum,
                   reward_range=a.reward_range, eval_samples=a.eval_samples, seed=a.seed)


def cmd_gen(a) -> int:
    spec = spec_from_args(a)
    env = generate(spec)
    classes = {} if a.no_classes else default_classes(env, spec.seed)
    save_env(a.out, env, spec, classes)
    print(f"wrote {a.out}")
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

RUN_KEYS = {
    "env": None, "variant": "mf", "concept": "cce", "episodes": 200, "seeds": "0", "out": "runs",
    "schedule": "constant", "beta": 0.1, "lam": 1.0, "c_alpha": 1.0, "c_zeta": 1.0, "fit": "minimax",
    "fit_rounds": 10, "replearn_lam": 0.01, "eval_every": 10, "timing": False, "workers": 1,
}


def resolve_manifest(a) -> dict:
    """Flat TOML config first, then explicit flags."""
    m = dict(RUN_KEYS)
    if a.config:
        try:
            conf = tomli.loads(Path(a.config).read_text())
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {a.config}: {exc}") from exc
        unknown = set(conf) - set(m)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        m.update(conf)
    for key in RUN_KEYS:
        val = getattr(a, key, None)
        if val is not None:
            m[key] = val
    if not m["env"]:
        raise UsageError("an environment file is required (--env or 'env' in the config)")
    m["seeds"] = parse_seeds(str(m["seeds"]))
    return m


def run_config(m: dict, seed: int) -> RunConfig:
    bonus = BonusParams(mode=m["schedule"], beta=m["beta"], lam=m["lam"], c_alpha=m["c_alpha"], c_zeta=m["c_zeta"])
    return RunConfig(variant=m["variant"], concept=m["concept"], episodes=int(m["episodes"]), bonus=bonus,
                     fit=m["fit"], fit_rounds=int(m["fit_rounds"]), replearn_lam=m["replearn_lam"],
                     eval_every=int(m["eval_every"]), seed=seed)


def _class_for(variant: str, classes: dict):
    return classes.get({"mb": "model", "mf": "features", "factored": "factored"}[variant])


def csv_text(result, header: str, timing: bool) -> str:
    M = len(result.records[0].vbar)
    cols = ["n", "delta"] + [f"vbar_{i}" for i in range(M)] + [f"vlow_{i}" for i in range(M)] + ["exploit"]
    if timing:
        cols.append("wall_ms")
    f = f"{{:.{CSV_DIGITS}f}}"
    lines = [header, ",".join(cols)]
    for r in result.records:
        row = [str(r.n), f.format(r.delta)] + [f.format(x) for x in r.vbar] + [f.format(x) for x in r.vlow]
        row.append("" if r.exploit is None else f.format(r.exploit))
        if timing:
            row.append(f"{r.wall_ms:.3f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _run_seed(args) -> dict:
    m, seed, header = args
    env, _, classes = load_env(m["env"])
    cfg = run_config(m, seed)
    t0 = time.perf_counter()
    result = run(env, cfg, _class_for(cfg.variant, classes))
    wall = time.perf_counter() - t0
    block = env.block if isinstance(env, FactoredEnv) else env
    supports = block.supports if isinstance(block, BlockEnv) else None
    return {
        "seed": seed, "csv": csv_text(result, header, m["timing"]), "final_exploit": result.final_exploit,
        "best_n": result.best_n, "wall_s": wall, "sandwich_violations": result.sandwich_violations,
        "simplex_violations": result.simplex_violations,
        "policy": policy_to_dict(result.policy, supports, {"seed": seed}) if supports is not None else None,
    }


def execute(m: dict) -> dict:
    """Run every seed of a resolved manifest and write CSVs, policies and the summary."""
    env_bytes = Path(m["env"]).read_bytes()
    # Output location and worker count do not change results, so they stay out of the hash.
    hashed = {k: v for k, v in m.items() if k not in ("out", "workers")}
    manifest_hash = sha256(json.dumps(hashed, sort_keys=True, default=str).encode())
    env_hash = blob_sha1(env_bytes)
    header = f"# manifest_sha256={manifest_hash} env_blob_sha1={env_hash}"
    out = Path(m["out"])
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(m, s, header) for s in m["seeds"]]
    if int(m["workers"]) > 1:
        with ProcessPoolExecutor(max_workers=int(m["workers"])) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    for r in results:
        (out / f"seed_{r['seed']}.csv").write_text(r["csv"])
        if r["policy"] is not None:
            r["policy"]["meta"].update(manifest_sha256=manifest_hash, env_blob_sha1=env_hash)
            (out / f"policy_seed_{r['seed']}.json").write_text(dumps(r["policy"]))
    finals = [r["final_exploit"] for r in results]
    summary = {
        "manifest_sha256": manifest_hash, "env_blob_sha1": env_hash, "manifest": m,
        "seeds": m["seeds"], "final_exploit": finals, "mean": float(np.mean(finals)), "std": float(np.std(finals)),
        "formatted": mean_std(finals), "best_n": [r["best_n"] for r in results],
        "wall_s": [r["wall_s"] for r in results],
        "sandwich_violations": sum(r["sandwich_violations"] for r in results),
        "simplex_violations": sum(r["simplex_violations"] for r in results),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str) + "\n")
    return summary


def cmd_run(a) -> int:
    m = resolve_manifest(a)
    summary = execute(m)
    print(f"final exploitability {summary['formatted']} over seeds {m['seeds']}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(a) -> int:
    env, _, _ = load_env(a.env)
    if isinstance(env, FactoredEnv):
        env = env.block
    if not isinstance(env, BlockEnv):
        raise GameError("eval needs a block or factored environment")
    policy = load_policy(a.policy)
    if policy.horizon != env.horizon or policy.action_sizes != env.action_sizes:
        raise GameError("policy shape does not match the environment")
    print(f"{exploitability(env, policy, a.concept):.6f}")
    return 0


# ---------------------------------------------------------------------------
# table1
# ---------------------------------------------------------------------------

def table1_spec(H: int, env_seed: int, obs_mode: str, zero_sum: bool) -> EnvSpec:
    return EnvSpec(family="block", H=H, Z=3, M=2, actions=3, k=2, obs_mode=obs_mode, zero_sum=zero_sum, seed=env_seed)


def table1_markdown(cells: dict) -> str:
    lines = []
    for H in (3, 10):
        if H not in cells:
            continue
        heads = [f"H={H} Environment {j + 1}" for j in range(len(TABLE1_ENV_SEEDS))]
        lines += ["| | " + " | ".join(heads) + " |", "|---" * (len(heads) + 1) + "|",
                  "| published | " + " | ".join(PUBLISHED_TABLE1[H]) + " |",
                  "| measured | " + " | ".join(cells[H]) + " |", ""]
    return "\n".join(lines)


def cmd_table1(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = parse_seeds(a.seeds)
    horizons = [3] if a.short_only else [3, 10]
    cells = {}
    for H in horizons:
        row = []
        for j, env_seed in enumerate(TABLE1_ENV_SEEDS):
            spec = table1_spec(H, env_seed, a.obs_mode, a.zero_sum)
            env = generate(spec)
            env_path = out / f"H{H}_env{j + 1}.json"
            save_env(env_path, env, spec, default_classes(env, spec.seed))
            m = dict(RUN_KEYS, env=str(env_path), variant="mf", concept="cce", seeds=seeds,
                     episodes=a.episodes or TABLE1_EPISODES[H], out=str(out / f"H{H}_env{j + 1}"), eval_every=0)
            summary = execute(m)
            row.append(summary["formatted"])
            print(f"H={H} env {j + 1}: {summary['formatted']}", flush=True)
        cells[H] = row
    text = table1_markdown(cells)
    (out / "table1.md").write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repgame", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate an environment JSON")
    g.add_argument("--family", default="block", choices=("tabular", "block", "factored"))
    g.add_argument("--H", type=int, default=3)
    g.add_argument("--Z", type=int, default=3)
    g.add_argument("--players", type=int, default=2)
    g.add_argument("--actions", type=int, default=3)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--obs-mode", default="categorical", choices=("categorical", "hadamard"))
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--topology", default="ring", choices=("ring", "grid"))
    g.add_argument("--L", type=int, default=2)
    g.add_argument("--local-states", type=int, default=2)
    g.add_argument("--zero-sum", action="store_true")
    g.add_argument("--reward-range", default="-1,1", choices=("-1,1", "0,1"))
    g.add_argument("--eval-samples", type=int, default=16)
    g.add_argument("--no-classes", action="store_true", help="omit candidate classes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the learner over seeds")
    r.add_argument("--config", help="flat TOML file; flags override it")
    r.add_argument("--env")
    r.add_argument("--variant", choices=("mb", "mf", "factored"))
    r.add_argument("--concept", choices=("ne", "cce", "ce"))
    r.add_argument("--episodes", type=int)
    r.add_argument("--seeds", help="'0..4' or '0,2,5'")
    r.add_argument("--out")
    r.add_argument("--schedule", choices=("constant", "theory"))
    r.add_argument("--beta", type=float)
    r.add_argument("--lam", type=float)
    r.add_argument("--c-alpha", dest="c_alpha", type=float)
    r.add_argument("--c-zeta", dest="c_zeta", type=float)
    r.add_argument("--fit", choices=("minimax", "iterative"))
    r.add_argument("--fit-rounds", dest="fit_rounds", type=int)
    r.add_argument("--replearn-lam", dest="replearn_lam", type=float)
    r.add_argument("--eval-every", dest="eval_every", type=int)
    r.add_argument("--timing", action="store_true", default=None, help="add wall_ms to CSVs (breaks byte equality)")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="exact exploitability of a stored policy")
    e.add_argument("--env", required=True)
    e.add_argument("--policy", required=True)
    e.add_argument("--concept", default="cce", choices=("ne", "cce", "ce"))
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("table1", help="regenerate the short/long-horizon exploitability table")
    t.add_argument("--out", required=True)
    t.add_argument("--seeds", default="0..4")
    t.add_argument("--episodes", type=int, help="override the per-horizon episode budget")
    t.add_argument("--obs-mode", default="categorical", choices=("categorical", "hadamard"))
    t.add_argument("--zero-sum", action="store_true")
    t.add_argument("--short-only", action="store_true", help="skip the H=10 block")
    t.set_defaults(func=cmd_table1)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"repgame: usage error: {exc}", file=sys.stderr)
        return 1
    except (GameError, OSError, KeyError, ValueError) as exc:
        print(f"repgame: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
