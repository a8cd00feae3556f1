import numpy as np
import pytest

from pilot import env as envmod
from pilot import physics as ph
from pilot import terrain as tr
from pilot.env import (Command, CurriculumState, EnvConfig, LocoEnv,
                       REWARD_WEIGHTS, build_observation, check_termination,
                       compute_reward, curriculum_update, initial_curriculum,
                       sample_command, sample_upper_radius)


@pytest.fixture(scope="module")
def model():
    return ph.RobotModel()


def small_env(model, n=2, **kw):
    kw.setdefault("terrain_mix", {"flat": 1.0})
    cfg = EnvConfig(num_envs=n, seed=3, **kw)
    e = LocoEnv(model, cfg)
    e.reset()
    return e


# -- upper-body radius sampler (truncated exponential) -----------------------

def test_upper_radius_endpoints():
    for alpha in (0.0, 0.3, 1.0):
        assert sample_upper_radius(alpha, 0.0) == 0.0
        assert sample_upper_radius(alpha, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_upper_radius_frozen_values():
    # frozen from a 30-digit mpmath evaluation of the closed form
    assert sample_upper_radius(0.0, 0.5) == pytest.approx(
        0.034657358924939584, abs=1e-15)
    assert sample_upper_radius(0.5, 0.5) == pytest.approx(
        0.068624366519649686, abs=1e-15)
    assert sample_upper_radius(1.0, 0.25) == pytest.approx(
        0.231881286526678664, abs=1e-15)


def test_upper_radius_cdf_ks():
    rng = np.random.default_rng(0)
    for alpha in (0.0, 0.5, 1.0):
        u = rng.uniform(size=100_000)
        r = sample_upper_radius(alpha, u)
        assert r.min() >= 0.0 and r.max() <= 1.0
        k = 20.0 * (1.0 - 0.99 * alpha)
        r_sorted = np.sort(r)
        cdf = -np.expm1(-k * r_sorted) / -np.expm1(-k)
        ecdf_hi = np.arange(1, r.size + 1) / r.size
        ecdf_lo = np.arange(0, r.size) / r.size
        ks = max(np.abs(ecdf_hi - cdf).max(), np.abs(ecdf_lo - cdf).max())
        assert ks < 0.01, (alpha, ks)


# -- command sampling ---------------------------------------------------------

def test_command_height_degenerate_at_alpha_zero(model):
    curr = CurriculumState()
    rng = np.random.default_rng(1)
    for _ in range(50):
        cmd = sample_command(curr, rng, model)
        assert cmd.h_base[0] == pytest.approx(envmod.H_MAX)


def test_command_height_bounds_at_alpha_one(model):
    curr = CurriculumState(alpha_height=1.0, stage="height")
    rng = np.random.default_rng(2)
    hs = np.array([sample_command(curr, rng, model).h_base[0]
                   for _ in range(100_000)])
    assert hs.min() >= envmod.H_MIN - 1e-12
    assert hs.max() <= envmod.H_MAX + 1e-12
    assert abs(hs.min() - envmod.H_MIN) < 0.005
    # never below the curriculum floor
    floor = envmod.H_MAX - 1.0 * (envmod.H_MAX - envmod.H_MIN)
    assert (hs >= floor - 1e-12).all()


def test_command_arm_formula_and_nominal(model):
    # outside the manipulation stage the arm target is pinned to nominal
    curr = CurriculumState(stage="height", alpha_height=0.5)
    rng = np.random.default_rng(3)
    cmd = sample_command(curr, rng, model)
    assert cmd.mode[0] == 0.0
    np.testing.assert_array_equal(cmd.q_arm_star[0], model.arm_nominal)

    # q* = bound * U(0, r) * sign stays inside the joint bounds
    curr = CurriculumState(stage="manipulation", alpha_arm=1.0)
    seen_mode = set()
    for _ in range(200):
        cmd = sample_command(curr, rng, model)
        seen_mode.add(float(cmd.mode[0]))
        if cmd.mode[0] > 0:
            assert (np.abs(cmd.q_arm_star[0]) <= model.q_hi_arr[5:]).all()
        else:
            np.testing.assert_array_equal(cmd.q_arm_star[0], model.arm_nominal)
    assert seen_mode == {0.0, 1.0}


class _FakeRng:
    """Deterministic draw sequence matching sample_command's consumption."""

    def __init__(self, uniforms, normals):
        self.uniforms = list(uniforms)
        self.normals = list(normals)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        if size is None:
            return lo + (hi - lo) * self.uniforms.pop(0)
        return np.array([lo + (hi - lo) * self.uniforms.pop(0)
                         for _ in range(size)])

    def standard_normal(self, size=None):
        if size is None:
            return self.normals.pop(0)
        return np.array([self.normals.pop(0) for _ in range(size)])


def test_command_arm_product_formula(model):
    # q* = q_bound * U(0, r_upper) * sign: bound 2.0, draw 0.3, sign -1 -> -0.6
    curr = CurriculumState(stage="manipulation", alpha_arm=1.0)
    # draws: u_v, u_h, u_pitch, u_mode(<0.5 -> mode 1), u_r, u_mag x2, signs x2
    rng = _FakeRng(uniforms=[0.5, 0.5, 0.5, 0.2, 1.0, 0.3, 0.3],
                   normals=[-1.0, -1.0])
    cmd = sample_command(curr, rng, model)
    assert cmd.mode[0] == 1.0
    # u_r = 1.0 makes r_upper exactly 1, so q* = 2.0 * 0.3 * (-1) = -0.6
    np.testing.assert_allclose(cmd.q_arm_star[0], [-0.6, -0.6], atol=1e-12)


def test_initial_curriculum_starts_at_locomotion(model):
    curr = initial_curriculum(EnvConfig(num_envs=1))
    assert curr.stage == "locomotion"
    assert curr.alpha_height == curr.alpha_arm == curr.alpha_torso == 0.0
    assert curr.alpha_terrain == 0.0
    assert curr.alpha_v == pytest.approx(0.3)
    assert CurriculumState(alpha_terrain=1.0).alpha_v == pytest.approx(1.0)


def test_command_arm_sign_symmetry(model):
    from scipy.stats import binomtest
    curr = CurriculumState(stage="manipulation", alpha_arm=0.8)
    rng = np.random.default_rng(4)
    signs = []
    while len(signs) < 100_000:
        cmd = sample_command(curr, rng, model)
        if cmd.mode[0] > 0:
            signs.extend(np.sign(cmd.q_arm_star[0]).tolist())
    signs = np.array(signs[:100_000])
    pos = int((signs > 0).sum())
    assert binomtest(pos, signs.size, 0.5).pvalue > 0.01


def test_command_velocity_range(model):
    # the speed range opens with the locomotion-stage factor
    rng = np.random.default_rng(5)
    early = CurriculumState()
    vs = np.array([sample_command(early, rng, model).v_x[0] for _ in range(500)])
    assert np.abs(vs).max() <= 0.3 + 1e-12
    mature = CurriculumState(alpha_terrain=1.0)
    vs = np.array([sample_command(mature, rng, model).v_x[0] for _ in range(2000)])
    assert vs.min() >= -1.0 and vs.max() <= 1.0
    assert vs.min() < -0.9 and vs.max() > 0.9


# -- curriculum ----------------------------------------------------------------

def _stats(n, **kernels):
    return [(n, {k: v * n for k, v in kernels.items()})]


def test_curriculum_increment_and_gate():
    curr = CurriculumState(stage="height", alpha_height=0.9)
    out = curriculum_update(curr, _stats(60, height=0.85, lin_vel=1, torso_pitch=1,
                                         arm=1))
    assert out.alpha_height == pytest.approx(0.95)
    assert out.stage == "height"
    # gate unmet: unchanged
    out2 = curriculum_update(curr, _stats(60, height=0.5, lin_vel=1, torso_pitch=1,
                                          arm=1))
    assert out2 == curr


def test_curriculum_stage_advance_and_lock():
    curr = CurriculumState(stage="height", alpha_height=1.0)
    stats = _stats(60, height=0.9, lin_vel=1, torso_pitch=1, arm=1)
    assert curriculum_update(curr, stats).stage == "orientation"
    assert curriculum_update(curr, stats, locked=True).stage == "height"


def test_curriculum_needs_fifty_episodes():
    curr = CurriculumState(stage="height", alpha_height=0.5)
    assert curriculum_update(curr, _stats(30, height=0.99, lin_vel=1,
                                          torso_pitch=1, arm=1)) == curr


def test_curriculum_monotone_over_random_updates():
    rng = np.random.default_rng(6)
    curr = CurriculumState()
    for _ in range(300):
        stats = _stats(60, lin_vel=rng.uniform(0, 1), height=rng.uniform(0, 1),
                       torso_pitch=rng.uniform(0, 1), arm=rng.uniform(0, 1))
        nxt = curriculum_update(curr, stats)
        for a in ("alpha_height", "alpha_arm", "alpha_torso", "alpha_terrain"):
            assert getattr(nxt, a) >= getattr(curr, a)
        assert nxt.stage_index >= curr.stage_index
        # alpha invariants from the stage ordering
        if nxt.stage_index < 1:
            assert nxt.alpha_height == 0.0
        if nxt.stage != "manipulation":
            assert nxt.alpha_arm == 0.0
        curr = nxt


# -- observations ---------------------------------------------------------------

def test_observation_width_and_reset_padding(model):
    e = small_env(model, n=3)
    obs = e.observation()
    assert obs.flat.shape == (3, envmod.OBS_WIDTH)
    frames = obs.frames
    for h in range(envmod.HISTORY):
        np.testing.assert_array_equal(frames[:, h], frames[:, -1])


def test_observation_shift_rule(model):
    e = small_env(model, n=2)
    a = np.zeros((2, 7))
    obs1, *_ = e.step(a)
    f1 = obs1.frames.copy()
    obs2, *_ = e.step(a)
    f2 = obs2.frames
    np.testing.assert_array_equal(f1[:, -1], f2[:, -2])
    np.testing.assert_array_equal(f1[:, 1:], f2[:, :-1])


def test_build_observation_rejects_nonfinite(model):
    e = small_env(model, n=1)
    st = e.state.copy()
    st.coords[0, 4] = np.nan  # a joint angle; base_x is not observed
    with pytest.raises(envmod.InvalidStateError):
        build_observation(e.buffer, st, np.zeros((1, 11)), e.command,
                          np.zeros((1, 7)))


def test_scan_entries_clipped(model):
    e = small_env(model, n=2)
    scan = e.observation().scan
    assert (np.abs(scan) <= 1.0).all()


# -- rewards --------------------------------------------------------------------

def _perfect_setup(model, n=1):
    st = ph.standing_state(model, n)
    cmd = Command.zeros(n, model)
    cmd.h_base[:] = model.nominal_height
    window = envmod.ContactWindow.zeros(n)
    window.contact_frac[:] = 1.0
    return st, cmd, window


def test_reward_perfect_tracking_kernels(model):
    st, cmd, window = _perfect_setup(model)
    rb = compute_reward(model, st, st, cmd, window, np.zeros((1, 7)),
                        np.zeros((1, 7)), envmod.CONTROL_DT, np.zeros(1),
                        np.zeros(1, dtype=bool))
    for key in ("lin_vel", "height", "torso_pitch", "arm", "pitch_rate"):
        assert rb.terms[key][0] == pytest.approx(1.0), key


def test_reward_kernel_at_one_sigma(model):
    st, cmd, window = _perfect_setup(model)
    st.vels[:, 0] = envmod.SIGMA_V  # velocity error of exactly one sigma
    rb = compute_reward(model, st, st, cmd, window, np.zeros((1, 7)),
                        np.zeros((1, 7)), envmod.CONTROL_DT, np.zeros(1),
                        np.zeros(1, dtype=bool))
    assert rb.terms["lin_vel"][0] == pytest.approx(np.exp(-1.0))


def test_reward_termination_weight(model):
    st, cmd, window = _perfect_setup(model)
    args = (model, st, st, cmd, window, np.zeros((1, 7)), np.zeros((1, 7)),
            envmod.CONTROL_DT, np.zeros(1))
    alive = compute_reward(*args, np.zeros(1, dtype=bool))
    dead = compute_reward(*args, np.ones(1, dtype=bool))
    assert dead.total[0] - alive.total[0] == pytest.approx(-200.0)


def test_reward_total_is_weighted_sum(model):
    rng = np.random.default_rng(7)
    st = ph.standing_state(model, 4)
    st.vels[:] = rng.uniform(-1, 1, st.vels.shape)
    cmd = Command.zeros(4, model)
    cmd.v_x[:] = rng.uniform(-1, 1, 4)
    window = envmod.ContactWindow(*(np.abs(rng.uniform(0, 2, (6, 4)))))
    rb = compute_reward(model, st, st, cmd, window, rng.uniform(-1, 1, (4, 7)),
                        rng.uniform(-1, 1, (4, 7)), envmod.CONTROL_DT,
                        np.zeros(4), np.zeros(4, dtype=bool))
    expect = sum(REWARD_WEIGHTS[k] * v for k, v in rb.terms.items())
    np.testing.assert_allclose(rb.total, expect, rtol=1e-12)
    assert set(rb.terms) == set(REWARD_WEIGHTS)


# -- termination -----------------------------------------------------------------

def test_termination_rules(model):
    st = ph.standing_state(model, 3)
    cmd = Command.zeros(3, model)
    st.coords[1, 1] = 0.1          # fallen
    st.coords[2, 2] = 1.3          # tilted beyond the command corridor
    out = check_termination(st, cmd, np.zeros(3), np.zeros(3, dtype=bool))
    np.testing.assert_array_equal(out, [False, True, True])
    fault = np.array([True, False, False])
    assert check_termination(st, cmd, np.zeros(3), fault)[0]


def test_timeout_is_not_termination(model):
    e = small_env(model, n=1, episode_steps=3)
    a = np.zeros((1, 7))
    for _ in range(2):
        _, _, done, info = e.step(a)
        assert not done[0]
    _, rb, done, info = e.step(a)
    assert done[0] and info["timeout"][0]
    assert rb.terms["termination"][0] == 0.0  # no -200 on timeout


# -- env stepping -----------------------------------------------------------------

def test_step_advances_20ms(model):
    e = small_env(model, n=1)
    t0 = e.state.copy()
    e.step(np.zeros((1, 7)))
    # 10 substeps of 2 ms each
    assert e.steps[0] == 1
    assert envmod.CONTROL_DT == pytest.approx(0.02)


def test_residual_identity_for_arm(model):
    e = small_env(model, n=1)
    # zero arm action: PD target equals the commanded arm exactly; drive the
    # env and confirm the target passed to the PD was q_arm_star
    cmd_arm = e.command.q_arm_star.copy()
    captured = {}
    orig = ph.pd_torque

    def spy(m, q_des, state):
        captured.setdefault("q_des", q_des.copy())
        return orig(m, q_des, state)

    ph.pd_torque = spy
    try:
        e.step(np.zeros((1, 7)))
    finally:
        ph.pd_torque = orig
    np.testing.assert_array_equal(captured["q_des"][:, 5:], cmd_arm)


def test_action_validation(model):
    e = small_env(model, n=1)
    with pytest.raises(envmod.ContractError):
        e.step(np.full((1, 7), 1.5))
    with pytest.raises(envmod.ContractError):
        e.step(np.full((1, 7), np.nan))
    with pytest.raises(envmod.ContractError):
        e.step(np.zeros((1, 3)))


def test_stepping_done_env_raises(model):
    e = small_env(model, n=1, episode_steps=1)
    e.step(np.zeros((1, 7)))
    with pytest.raises(envmod.ContractError):
        e.step(np.zeros((1, 7)))
    e.reset_envs([0])
    e.step(np.zeros((1, 7)))  # fine after reset


def test_auto_reset_returns_fresh_obs(model):
    cfg = EnvConfig(num_envs=1, seed=0, episode_steps=2, auto_reset=True,
                    terrain_mix={"flat": 1.0})
    e = LocoEnv(ph.RobotModel(), cfg)
    e.reset()
    e.step(np.zeros((1, 7)))
    obs, _, done, info = e.step(np.zeros((1, 7)))
    assert done[0]
    assert e.steps[0] == 0  # reset happened
    frames = obs.frames
    np.testing.assert_array_equal(frames[:, 0], frames[:, -1])  # padded anew


def test_command_resample_period(model):
    e = small_env(model, n=1, resample_steps=5, episode_steps=50)
    v0 = float(e.command.v_x[0])
    changed_at = []
    for step in range(1, 13):
        e.step(np.zeros((1, 7)))
        if float(e.command.v_x[0]) != v0:
            changed_at.append(step)
            v0 = float(e.command.v_x[0])
    assert changed_at == [5, 10]


def test_rollout_determinism(model):
    def run():
        e = small_env(model, n=2, episode_steps=40)
        rng = np.random.default_rng(9)
        total = np.zeros(2)
        for _ in range(20):
            a = np.clip(rng.normal(0, 0.3, (2, 7)), -1, 1)
            obs, rb, done, info = e.step(a)
            total += rb.total
            if done.any():
                e.reset_envs(np.flatnonzero(done))
        return total, obs.flat.copy()

    t1, o1 = run()
    t2, o2 = run()
    np.testing.assert_array_equal(t1, t2)
    np.testing.assert_array_equal(o1, o2)


def test_env_streams_independent_of_batch_size(model):
    # env i's randomness comes from its own seeded generator, so its
    # trajectory is identical no matter how many envs share the batch
    # (the basis for worker-count invariance)
    def run(n_envs, i):
        cfg = EnvConfig(num_envs=n_envs, seed=3, terrain_mix={"flat": 1.0})
        e = LocoEnv(ph.RobotModel(), cfg)
        e.reset()
        acts = np.zeros((n_envs, 7))
        trace = []
        for _ in range(5):
            obs, rb, done, info = e.step(acts)
            trace.append(obs.flat[i].copy())
        return np.array(trace)

    np.testing.assert_array_equal(run(2, 1), run(6, 1))


def test_episode_info_on_termination(model):
    e = small_env(model, n=1, episode_steps=400)
    done = np.array([False])
    info = {}
    k = 0
    while not done.any() and k < 400:
        # slam the hips to make it fall over
        _, _, done, info = e.step(np.tile([[0, 1, -1, 1, -1, 0, 0]], (1, 1)))
        k += 1
    assert done[0]
    ep = info["episodes"][0]
    assert ep["env"] == 0 and ep["length"] == k
    assert 0.0 <= ep["kernels"]["height"] <= 1.0
    assert ep["errors"]["v"] >= 0.0
    assert not ep["timeout"]
