import numpy as np
import pytest

from pilot import netcore as nc
from pilot import policy as pol
from pilot.policy import (CheckpointError, Policy, PolicyConfig, load_policy,
                          read_checkpoint, save_policy, write_checkpoint)


def make_policy(seed=0, dtype=np.float64, **kw):
    return Policy(PolicyConfig(**kw), seed=seed, dtype=dtype)


def rand_obs(rng, n, cfg: PolicyConfig):
    return rng.uniform(-1, 1, (n, cfg.obs_width))


def test_encoder_output_widths():
    p = make_policy()
    rng = np.random.default_rng(0)
    obs = rand_obs(rng, 3, p.cfg)
    z_h, v_hat, z_next = p.encode_history(obs)
    assert z_h.shape == (3, 32)
    assert v_hat.shape == (3, 2)
    assert z_next.shape == (3, 16)
    out = p.forward(obs, true_vel=np.zeros((3, 2)))
    assert out.mean.shape == (3, 7)
    assert out.gate_probs.shape == (3, 4)
    assert out.expert_means.shape == (3, 4, 7)
    assert out.value.shape == (3,)


def test_forward_deterministic():
    p = make_policy()
    obs = rand_obs(np.random.default_rng(1), 2, p.cfg)
    a = p.forward(obs).mean.data
    b = p.forward(obs).mean.data
    np.testing.assert_array_equal(a, b)


def test_z_p_width_is_concatenation():
    cfg = PolicyConfig()
    p = Policy(cfg, dtype=np.float64)
    rng = np.random.default_rng(2)
    scan = nc.Tensor(rng.uniform(-1, 1, (2, cfg.scan_width)))
    o_n = nc.Tensor(rng.uniform(-1, 1, (2, cfg.frame_width)))
    z_p = p.encode_perception(scan, o_n)
    assert z_p.shape == (2, cfg.global_out + cfg.attn_out)
    assert cfg.z_p == cfg.global_out + cfg.attn_out


def test_flat_scan_attention_independent_of_weights():
    # constant scan -> identical local features -> attended output equals any
    # convex mix; perturbing only the attention's query projection changes
    # nothing on flat ground
    p = make_policy()
    rng = np.random.default_rng(3)
    scan = nc.Tensor(np.full((2, 11), 0.76))
    o_n1 = nc.Tensor(rng.uniform(-1, 1, (2, 30)))
    o_n2 = nc.Tensor(rng.uniform(-1, 1, (2, 30)))
    a = p.encode_perception(scan, o_n1).data
    b = p.encode_perception(scan, o_n2).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_scan_slot_permutation_changes_output():
    # the learned positional bias injects slot identity
    p = make_policy()
    rng = np.random.default_rng(4)
    scan = rng.uniform(-1, 1, 11)
    o_n = nc.Tensor(rng.uniform(-1, 1, (1, 30)))
    swapped = scan.copy()
    swapped[[2, 8]] = swapped[[8, 2]]
    a = p.encode_perception(nc.Tensor(scan[None, :]), o_n).data
    b = p.encode_perception(nc.Tensor(swapped[None, :]), o_n).data
    assert np.abs(a - b).max() > 1e-6


def test_moe_one_hot_equals_selected_expert():
    p = make_policy()
    rng = np.random.default_rng(5)
    obs = rand_obs(rng, 3, p.cfg)
    out = p.forward(obs)
    for k in range(4):
        onehot = np.zeros((3, 4))
        onehot[:, k] = 1.0
        forced = p.forward(obs, gate_override=onehot)
        assert np.array_equal(forced.mean.data, out.expert_means.data[:, k, :])


def test_moe_equal_gate_is_expert_average():
    p = make_policy()
    obs = rand_obs(np.random.default_rng(6), 4, p.cfg)
    out = p.forward(obs, gate_override=np.full((4, 4), 0.25))
    np.testing.assert_allclose(out.mean.data, out.expert_means.data.mean(axis=1),
                               atol=1e-12)


def test_gate_probs_sum_to_one():
    p = make_policy()
    obs = rand_obs(np.random.default_rng(7), 1000, p.cfg)
    out = p.forward(obs)
    np.testing.assert_allclose(out.gate_probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert (out.gate_probs.data >= 0).all()


def test_gate_logit_shift_invariance():
    p = make_policy()
    obs = rand_obs(np.random.default_rng(8), 2, p.cfg)
    out1 = p.forward(obs)
    p.gate.layers[-1].b.data = p.gate.layers[-1].b.data + 5.0
    out2 = p.forward(obs)
    np.testing.assert_allclose(out1.gate_probs.data, out2.gate_probs.data, atol=1e-9)
    np.testing.assert_allclose(out1.mean.data, out2.mean.data, atol=1e-9)
    assert np.array_equal(out1.gate_probs.data.argmax(1), out2.gate_probs.data.argmax(1))


def test_monolithic_variant_single_expert():
    p = make_policy(monolithic=True)
    obs = rand_obs(np.random.default_rng(9), 3, p.cfg)
    out = p.forward(obs)
    assert out.gate_probs.shape == (3, 1)
    np.testing.assert_array_equal(out.gate_probs.data, 1.0)
    assert np.array_equal(out.mean.data, out.expert_means.data[:, 0, :])


def test_mask_scan_variant_ignores_scan():
    p = make_policy(mask_scan=True)
    rng = np.random.default_rng(10)
    obs = rand_obs(rng, 2, p.cfg)
    obs2 = obs.copy()
    obs2[:, -11:] = rng.uniform(-1, 1, (2, 11))
    np.testing.assert_array_equal(p.forward(obs).mean.data,
                                  p.forward(obs2).mean.data)


def test_flat_encoder_variant_widths():
    p = make_policy(flat_encoder=True)
    obs = rand_obs(np.random.default_rng(11), 2, p.cfg)
    out = p.forward(obs)
    assert out.mean.shape == (2, 7)


def test_logstd_clamped():
    p = make_policy()
    p.store.params["log_std"].data[:] = -10.0
    out = p.forward(rand_obs(np.random.default_rng(12), 1, p.cfg))
    np.testing.assert_allclose(out.log_std.data, -4.0)
    p.store.params["log_std"].data[:] = 3.0
    out = p.forward(rand_obs(np.random.default_rng(12), 1, p.cfg))
    np.testing.assert_allclose(out.log_std.data, 1.0)


def test_sample_action_statistics():
    p = make_policy()
    obs = rand_obs(np.random.default_rng(13), 1, p.cfg)
    p.store.params["log_std"].data[:] = -4.0
    rng = np.random.default_rng(14)
    hits = 0
    trials = 2000
    for _ in range(trials):
        act = p.act(obs, np.zeros((1, 2)), rng.standard_normal((1, 7)))
        if np.abs(act["raw"] - act["mean"]).max() < 0.1:
            hits += 1
    assert hits / trials > 0.999


def test_log_prob_at_mean():
    p = make_policy()
    obs = rand_obs(np.random.default_rng(15), 1, p.cfg)
    act = p.act(obs, np.zeros((1, 2)), None)  # deterministic: action = mean
    expected = (-p.forward(obs).log_std.data - 0.5 * np.log(2 * np.pi)).sum()
    assert act["logp"][0] == pytest.approx(expected, rel=1e-9)
    np.testing.assert_array_equal(act["raw"], act["mean"])


def test_update_target_semantics():
    p = make_policy()
    before = {k: v.copy() for k, v in p.target_store.state_dict().items()}
    for v in p.store.params.values():
        v.data = v.data + 1.0
    p.update_target(1.0)
    for k, v in p.target_store.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    p.update_target(0.0)
    for k, v in p.target_store.state_dict().items():
        np.testing.assert_array_equal(v, p.store.params[k].data)


def test_update_target_geometric_convergence():
    p = make_policy()
    for _ in range(200):
        p.update_target(0.9)
    for k, v in p.target_store.state_dict().items():
        np.testing.assert_allclose(v, p.store.params[k].data, atol=1e-6)


def test_target_embedding_no_grad():
    p = make_policy()
    obs = rand_obs(np.random.default_rng(16), 2, p.cfg)
    emb = p.target_future_embedding(obs)
    assert emb.shape == (2, 16)


def test_full_policy_gradcheck_tiny():
    cfg = PolicyConfig.tiny()
    p = Policy(cfg, seed=1, dtype=np.float64)
    rng = np.random.default_rng(17)
    obs = rng.uniform(-1, 1, (3, cfg.obs_width))
    vel = rng.uniform(-1, 1, (3, 2))
    w_mean = rng.standard_normal((3, 7))
    w_val = rng.standard_normal(3)

    def f():
        out = p.forward(obs, true_vel=vel)
        loss = nc.sum_(nc.mul(out.mean, nc.constant(w_mean)))
        loss = nc.add(loss, nc.sum_(nc.mul(out.value, nc.constant(w_val))))
        loss = nc.add(loss, nc.sum_(nc.square(out.v_hat)))
        loss = nc.add(loss, nc.sum_(nc.square(out.z_next_hat)))
        loss = nc.add(loss, nc.sum_(nc.mul(out.gate_probs,
                                           nc.constant(np.ones((3, cfg.num_experts))))))
        return loss

    err = nc.grad_check(f, p.store.params)
    assert err < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    p = make_policy(seed=3, dtype=np.float32)
    path = tmp_path / "p.ckpt"
    save_policy(path, p, meta={"iteration": 5})
    loaded, meta = load_policy(path)
    assert meta["iteration"] == 5
    for k, v in p.state_dict().items():
        np.testing.assert_array_equal(v, loaded.state_dict()[k])
    obs = rand_obs(np.random.default_rng(18), 2, p.cfg)
    np.testing.assert_array_equal(p.forward(obs).mean.data,
                                  loaded.forward(obs).mean.data)


def test_checkpoint_rejects_corruption(tmp_path):
    p = make_policy(dtype=np.float32)
    path = tmp_path / "p.ckpt"
    save_policy(path, p)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad)


def test_checkpoint_rejects_config_mismatch(tmp_path):
    path = tmp_path / "c.ckpt"
    write_checkpoint(path, {"a": 1}, {"w": np.zeros(3, dtype=np.float32)})
    with pytest.raises(CheckpointError, match="does not match"):
        read_checkpoint(path, expected_config={"a": 2})
    cfg, meta, blocks = read_checkpoint(path, expected_config={"a": 1})
    assert cfg == {"a": 1}
    np.testing.assert_array_equal(blocks["w"], np.zeros(3))
