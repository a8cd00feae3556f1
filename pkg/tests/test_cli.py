import json

import pytest

from pilot import cli
from pilot import config as cfgmod
from pilot.policy import Policy, PolicyConfig, save_policy


def test_merge_preset_file_and_overrides(tmp_path):
    cfg_file = tmp_path / "extra.yaml"
    cfg_file.write_text("train.lr: 0.001\nterrain.mix.rough: 0.9\n")
    cfg = cfgmod.merge("stand_track", cfg_file, ["train.lr=5e-4", "env.num_envs=8"])
    assert cfg["train.lr"] == 5e-4          # CLI override wins over file
    assert cfg["terrain.mix.rough"] == 0.9  # file wins over preset
    assert cfg["env.num_envs"] == 8
    assert cfg["env.v_max"] == 0.0          # preset survives


def test_unknown_preset_rejected():
    with pytest.raises(ValueError, match="unknown preset"):
        cfgmod.merge("nope")


def test_build_functions_roundtrip():
    cfg = cfgmod.merge("locomotion", None, ["model.friction=0.9",
                                            "policy.n_experts=2"])
    model = cfgmod.build_model(cfg)
    assert model.friction == 0.9
    env_cfg = cfgmod.build_env_config(cfg, seed=3)
    assert env_cfg.seed == 3
    assert env_cfg.terrain_mix == {"flat": 0.4, "rough": 0.6}
    assert env_cfg.stage_cap == "orientation"
    pol = cfgmod.build_policy_config(cfg)
    assert pol.n_experts == 2
    tr = cfgmod.build_train_config(cfg, seed=3, out_dir="x")
    assert tr.iterations == 2000 and tr.out_dir == "x"


def test_parse_terrain_spec(tmp_path):
    assert cfgmod.parse_terrain_spec("stairs_up:0.4:3") == {
        "kind": "stairs_up", "difficulty": 0.4, "seed": 3}
    assert cfgmod.parse_terrain_spec("flat") == {"kind": "flat"}
    f = tmp_path / "t.yaml"
    f.write_text("kind: rough\ndifficulty: 0.2\nseed: 9\n")
    assert cfgmod.parse_terrain_spec(str(f))["kind"] == "rough"


def test_cli_train_eval_replay_smoke(tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main([
        "train", "--preset", "stand_track", "--seed", "0",
        "--out", str(out), "--log-every", "1",
        "--set", "env.num_envs=4",
        "--set", "train.iterations=2",
        "--set", "train.horizon=4",
        "--set", "train.epochs=1",
        "--set", "train.minibatches=1",
        "--set", "train.checkpoint_every=2",
        "--set", "policy.hist_hidden=[16,16]",
        "--set", "policy.expert_hidden=[12,12]",
        "--set", "policy.gate_hidden=[8,8]",
        "--set", "policy.critic_hidden=[12,12]",
        "--set", "policy.z_h=8",
        "--set", "policy.z_next=4",
        "--set", "policy.attn_d_model=8",
        "--set", "policy.attn_out=8",
        "--set", "policy.global_out=8",
        "--set", "policy.heads=2",
        "--set", "policy.phi1_hidden=[8]",
        "--set", "policy.phi2_hidden=[8]",
        "--set", "policy.psi_hidden=6",
        "--set", "policy.local_feat=5",
    ])
    assert rc == 0
    ckpt = out / "ckpt_000002.pt"
    assert ckpt.exists()

    # a policy-only checkpoint for eval/replay
    pol_ckpt = tmp_path / "tiny.ckpt"
    save_policy(pol_ckpt, Policy(PolicyConfig.tiny(), seed=0))
    rc = cli.main(["eval", "--ckpt", str(pol_ckpt), "--suite", "flat",
                   "--episodes", "1", "--seeds", "0",
                   "--out", str(tmp_path / "report")])
    assert rc == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()
             if l.startswith("{")]
    assert any(r.get("suite") == "aggregate" for r in lines)

    script = tmp_path / "s.csv"
    script.write_text("0.0, 0.0, 0.7, 0.0, 0.3, 0.6, 0\n0.5, 0.0, 0.7, 0.0, 0.3, 0.6, 0\n")
    rc = cli.main(["replay", "--ckpt", str(pol_ckpt), "--script", str(script),
                   "--seed", "1"])
    output = capsys.readouterr().out.strip().splitlines()[-1]
    parsed = json.loads(output)
    assert "success" in parsed and "e_h" in parsed
    assert rc in (0, 1)
