from __future__ import annotations

import json

import numpy as np
import pytest

from repgame.cli import PUBLISHED_TABLE1, main, mean_std, parse_seeds
from repgame.envs import EnvSpec, gen_block
from repgame.game import JointPolicy, exploitability
from repgame.planner import mb_plan
from repgame.serialize import dumps, load_env, load_policy, policy_to_dict, save_env


@pytest.fixture()
def env_file(tmp_path):
    path = tmp_path / "env.json"
    assert main(["gen", "--H", "2", "--seed", "3", "--out", str(path)]) == 0
    return path


def test_gen_is_deterministic(tmp_path, env_file):
    other = tmp_path / "again.json"
    main(["gen", "--H", "2", "--seed", "3", "--out", str(other)])
    assert other.read_bytes() == env_file.read_bytes()
    env, spec, classes = load_env(env_file)
    assert spec.H == 2 and set(classes) == {"model", "features"}


def test_run_outputs_and_byte_identity(tmp_path, env_file):
    args = ["run", "--env", str(env_file), "--variant", "mb", "--episodes", "4", "--seeds", "0..1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    for s in (0, 1):
        a = (tmp_path / "a" / f"seed_{s}.csv").read_bytes()
        assert a == (tmp_path / "b" / f"seed_{s}.csv").read_bytes()
        lines = a.decode().splitlines()
        assert lines[0].startswith("# manifest_sha256=") and "env_blob_sha1=" in lines[0]
        assert lines[1] == "n,delta,vbar_0,vbar_1,vlow_0,vlow_1,exploit"
        assert len(lines) == 2 + 4
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    assert summary["formatted"] == mean_std(summary["final_exploit"])
    pol = load_policy(tmp_path / "a" / "policy_seed_0.json")
    assert pol.horizon == 2


def test_timing_column(tmp_path, env_file):
    main(["run", "--env", str(env_file), "--variant", "mb", "--episodes", "2", "--timing", "--out", str(tmp_path)])
    header = (tmp_path / "seed_0.csv").read_text().splitlines()[1]
    assert header.endswith(",exploit,wall_ms")


def test_toml_config_and_override(tmp_path, env_file):
    conf = tmp_path / "run.toml"
    conf.write_text(f'env = "{env_file}"\nvariant = "mb"\nepisodes = 3\nseeds = "5"\n')
    assert main(["run", "--config", str(conf), "--episodes", "2", "--out", str(tmp_path / "o")]) == 0
    csv = (tmp_path / "o" / "seed_5.csv").read_text().splitlines()
    assert len(csv) == 2 + 2
    conf.write_text('env = "x"\nbogus = 1\n')
    assert main(["run", "--config", str(conf)]) == 1


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["run", "--variant", "nope"]) == 1
    assert main(["run", "--env", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert main(["run", "--env", "x", "--seeds", "3..1"]) == 1
    capsys.readouterr()


def test_ne_learner_request_is_runtime_error(tmp_path, env_file):
    assert main(["run", "--env", str(env_file), "--concept", "ne", "--episodes", "1", "--out", str(tmp_path)]) == 2


def test_eval_exact_equilibrium_prints_zero(tmp_path, capsys):
    spec = EnvSpec(H=2, seed=4)
    env = gen_block(spec)
    game = env.observation_game
    plan = mb_plan(list(game.transitions), list(game.rewards),
                   [np.zeros((game.n_states(h), game.n_joint)) for h in range(2)], game.init_dist,
                   env.action_sizes, "cce")
    env_path, pol_path = tmp_path / "env.json", tmp_path / "pol.json"
    save_env(env_path, env, spec)
    pol_path.write_text(dumps(policy_to_dict(plan.policy, env.supports)))
    capsys.readouterr()
    assert main(["eval", "--env", str(env_path), "--policy", str(pol_path), "--concept", "cce"]) == 0
    out = capsys.readouterr().out.strip()
    assert out == "0.000000"
    assert out == f"{exploitability(env, load_policy(pol_path), 'cce'):.6f}"


def test_eval_uniform_on_zero_sum(tmp_path, capsys):
    spec = EnvSpec(H=2, seed=5, zero_sum=True)
    env = gen_block(spec)
    env_path, pol_path = tmp_path / "env.json", tmp_path / "pol.json"
    save_env(env_path, env, spec)
    uni = JointPolicy.uniform(env.action_sizes, env.horizon)
    pol_path.write_text(dumps(policy_to_dict(uni, env.supports)))
    capsys.readouterr()
    assert main(["eval", "--env", str(env_path), "--policy", str(pol_path)]) == 0
    value = float(capsys.readouterr().out)
    assert value >= 0
    assert value == pytest.approx(exploitability(env, uni), abs=5e-7)


def test_table1_short(tmp_path, capsys):
    assert main(["table1", "--out", str(tmp_path), "--short-only", "--episodes", "2", "--seeds", "0"]) == 0
    text = (tmp_path / "table1.md").read_text()
    for cell in PUBLISHED_TABLE1[3]:
        assert cell in text
    assert "| measured |" in text
    capsys.readouterr()


def test_seed_parsing_and_format():
    assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds("2,7") == [2, 7]
    assert mean_std([0.001, 0.003]) == "0.0020 (0.0010)"
