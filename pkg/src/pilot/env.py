"""Goal-conditioned MDP for the planar loco-manipulation task.

Vectorized over environments: commands, observations, rewards and episode
bookkeeping are all (n, ...) arrays.  Each environment owns its RNG stream,
so rollouts are reproducible regardless of how envs are sheared across
workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import physics as ph
from . import terrain as tr

H_MIN, H_MAX = 0.3, 0.76
V_MAX = 1.0
PITCH_CMD_RANGE = (-0.3, 1.5)
HISTORY = 5
FRAME_WIDTH = 30
OBS_WIDTH = (HISTORY + 1) * FRAME_WIDTH + tr.SCAN_SAMPLES  # 191
ACTION_SCALE = 0.5
DECIMATION = 10
CONTROL_DT = DECIMATION * ph.PHYSICS_DT  # 0.02 s

STAGES = ("locomotion", "height", "orientation", "manipulation")
# Which curriculum factor each stage grows, and which tracking kernel gates it.
STAGE_ALPHA = {"locomotion": "alpha_terrain", "height": "alpha_height",
               "orientation": "alpha_torso", "manipulation": "alpha_arm"}
STAGE_GATE_KEY = {"locomotion": "lin_vel", "height": "height",
                  "orientation": "torso_pitch", "manipulation": "arm"}

# Table of reward weights (term name -> weight).
REWARD_WEIGHTS = {
    "lin_vel": 1.5,
    "pitch_rate": 2.0,
    "height": 1.0,
    "torso_pitch": 1.0,
    "arm": 1.0,
    "termination": -200.0,
    "action_rate": -0.01,
    "energy": -0.001,
    "joint_deviation": -0.2,
    "feet_stumble": -1.0,
    "feet_air_time": 2.0,
    "feet_slippage": -1.0,
    "feet_force": -0.005,
    "no_fly": 0.75,
}

SIGMA_V = 0.25        # m/s
SIGMA_H = 0.05        # m
SIGMA_PITCH = 0.15    # rad
SIGMA_ARM = 0.25      # rad
SIGMA_PITCH_RATE = 0.5   # rad/s, kernel width for the repurposed rate term
# desired rate = gain * orientation error, capped; kept gentle so holding a
# small constant error is not punished into perpetual rocking
PITCH_RATE_GAIN = 1.0
PITCH_RATE_CAP = 0.5
AIR_TIME_TARGET = 0.4    # s
AIR_TIME_FLOOR = -0.4    # worst per-touchdown credit (short-step penalty)
AIR_TIME_CMD_GATE = 0.1  # m/s; standing commands earn no stepping credit
FOOT_FORCE_FACTOR = 1.5  # threshold = factor * body weight
STUMBLE_TILT_LIMIT = 1.2  # rad, |base pitch - commanded torso pitch|
FALL_HEIGHT = 0.25        # m above local terrain


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class InvalidStateError(ValueError):
    """Observation inputs contain non-finite values."""


@dataclass
class EnvConfig:
    num_envs: int = 256
    episode_steps: int = 1000
    resample_steps: int = 250
    noise: bool = False
    seed: int = 0
    v_max: float = V_MAX
    gate: float = 0.8
    increment: float = 0.05
    terrain_mix: dict = field(default_factory=lambda: {"flat": 0.5, "rough": 0.5})
    fixed_terrain: dict | None = None   # exact terrain config; disables sampling
    stage_lock: str | None = None
    stage_cap: str | None = None
    init_alpha: dict = field(default_factory=dict)
    debug: bool = False
    auto_reset: bool = False

    def config_dict(self) -> dict:
        out = {}
        for name in ("num_envs", "episode_steps", "resample_steps", "noise", "seed",
                     "v_max", "debug"):
            out[f"env.{name}"] = getattr(self, name)
        out["curriculum.gate"] = self.gate
        out["curriculum.increment"] = self.increment
        out["curriculum.stage_lock"] = self.stage_lock
        out["curriculum.stage_cap"] = self.stage_cap
        out["curriculum.init_alpha"] = dict(self.init_alpha)
        for kind, w in self.terrain_mix.items():
            out[f"terrain.mix.{kind}"] = w
        return out


@dataclass(frozen=True)
class CurriculumState:
    alpha_height: float = 0.0    # widens the base-height goal range
    alpha_arm: float = 0.0       # widens the arm-target radius
    alpha_torso: float = 0.0     # widens the torso-pitch goal range
    alpha_terrain: float = 0.0   # scales sampled terrain difficulty
    stage: str = "locomotion"

    @property
    def alpha_v(self) -> float:
        # commanded-speed range opens with the locomotion stage's own factor:
        # tracking slow commands bootstraps the gait that faster ones need
        return 0.3 + 0.7 * self.alpha_terrain

    @property
    def stage_index(self) -> int:
        return STAGES.index(self.stage)

    def stage_alpha(self) -> float:
        return getattr(self, STAGE_ALPHA[self.stage])


def initial_curriculum(cfg: EnvConfig) -> CurriculumState:
    curr = CurriculumState(stage=cfg.stage_lock or "locomotion")
    if cfg.init_alpha:
        curr = replace(curr, **cfg.init_alpha)
    return curr


def curriculum_update(curr: CurriculumState, window_stats, gate: float = 0.8,
                      increment: float = 0.05, locked: bool = False,
                      stage_cap: str | None = None) -> CurriculumState:
    """Advance the active stage's factor when its tracking kernel clears the gate.

    window_stats: iterable of (n_episodes, {kernel: sum-over-episodes}) batches.
    Needs at least 50 episodes of evidence; otherwise returns curr unchanged.
    """
    total = sum(n for n, _ in window_stats)
    if total < 50:
        return curr
    key = STAGE_GATE_KEY[curr.stage]
    value = sum(sums[key] for _, sums in window_stats) / total
    if value <= gate:
        return curr
    alpha_name = STAGE_ALPHA[curr.stage]
    alpha = getattr(curr, alpha_name)
    if alpha >= 1.0:
        if locked or curr.stage_index == len(STAGES) - 1:
            return curr
        if stage_cap is not None and curr.stage_index + 1 > STAGES.index(stage_cap):
            return curr
        return replace(curr, stage=STAGES[curr.stage_index + 1])
    return replace(curr, **{alpha_name: min(1.0, alpha + increment)})


def sample_upper_radius(alpha_arm: float, u: float):
    """Truncated-exponential radius in [0, 1]; concentrates near 0 early on.

    Written as (1-u) + u*exp(-k) so u=1 maps to exactly 1.
    """
    k = 20.0 * (1.0 - 0.99 * alpha_arm)
    return -np.log((1.0 - u) + u * np.exp(-k)) / k


@dataclass
class Command:
    """Per-env command targets; mode 0 pins the arm to its nominal pose."""

    v_x: np.ndarray          # (n,)
    h_base: np.ndarray       # (n,)
    torso_pitch: np.ndarray  # (n,)
    q_arm_star: np.ndarray   # (n, 2)
    mode: np.ndarray         # (n,) float 0/1

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.v_x[:, None], self.h_base[:, None],
                               self.torso_pitch[:, None], self.q_arm_star,
                               self.mode[:, None]], axis=1)

    @classmethod
    def zeros(cls, n: int, model: ph.RobotModel) -> "Command":
        return cls(v_x=np.zeros(n), h_base=np.full(n, H_MAX),
                   torso_pitch=np.zeros(n),
                   q_arm_star=np.tile(model.arm_nominal, (n, 1)),
                   mode=np.zeros(n))

    def set_row(self, i: int, values: "Command"):
        self.v_x[i] = values.v_x[0]
        self.h_base[i] = values.h_base[0]
        self.torso_pitch[i] = values.torso_pitch[0]
        self.q_arm_star[i] = values.q_arm_star[0]
        self.mode[i] = values.mode[0]


def sample_command(curr: CurriculumState, rng: np.random.Generator,
                   model: ph.RobotModel, v_max: float = V_MAX) -> Command:
    """Draw one command; the draw count is fixed so streams stay aligned."""
    u_v = rng.uniform(-1.0, 1.0)
    u_h = rng.uniform()
    u_pitch = rng.uniform()
    u_mode = rng.uniform()
    u_r = rng.uniform()
    u_mag = rng.uniform(size=2)
    signs = np.sign(rng.standard_normal(2))

    v = u_v * curr.alpha_v * v_max
    h_lo = H_MAX - curr.alpha_height * (H_MAX - H_MIN)
    h = h_lo + u_h * (H_MAX - h_lo)
    p_lo, p_hi = PITCH_CMD_RANGE[0] * curr.alpha_torso, PITCH_CMD_RANGE[1] * curr.alpha_torso
    pitch = p_lo + u_pitch * (p_hi - p_lo)

    mode = 1.0 if (curr.stage == "manipulation" and u_mode < 0.5) else 0.0
    if mode > 0.0:
        r = sample_upper_radius(curr.alpha_arm, u_r)
        bounds = model.q_hi_arr[5:]
        arm = bounds * u_mag * r * signs
    else:
        arm = np.asarray(model.arm_nominal, dtype=np.float64).copy()
    return Command(v_x=np.array([v]), h_base=np.array([h]),
                   torso_pitch=np.array([pitch]),
                   q_arm_star=arm[None, :], mode=np.array([mode]))


@dataclass
class Observation:
    """History frames plus the elevation scan, flattened oldest-first."""

    flat: np.ndarray  # (n, 191)

    @property
    def frames(self) -> np.ndarray:
        n = self.flat.shape[0]
        return self.flat[:, :(HISTORY + 1) * FRAME_WIDTH].reshape(n, HISTORY + 1,
                                                                  FRAME_WIDTH)

    @property
    def scan(self) -> np.ndarray:
        return self.flat[:, (HISTORY + 1) * FRAME_WIDTH:]


class FrameBuffer:
    """Ring of the H most recent proprioceptive frames plus the current one."""

    def __init__(self, n: int):
        self.frames = np.zeros((n, HISTORY + 1, FRAME_WIDTH), dtype=np.float64)

    def reset_envs(self, idx: np.ndarray, frame: np.ndarray):
        self.frames[idx] = frame[:, None, :]

    def push(self, frame: np.ndarray):
        self.frames[:, :-1] = self.frames[:, 1:]
        self.frames[:, -1] = frame


def proprio_frame(state: ph.RobotState, cmd: Command,
                  prev_action: np.ndarray) -> np.ndarray:
    return np.concatenate([
        state.q, state.dq, state.pitch_rate[:, None],
        np.sin(state.pitch)[:, None], np.cos(state.pitch)[:, None],
        cmd.as_array(), prev_action,
    ], axis=1)


def build_observation(buffer: FrameBuffer, state: ph.RobotState, scan: np.ndarray,
                      cmd: Command, prev_action: np.ndarray) -> Observation:
    """Push the current frame and return the 191-wide stacked observation."""
    frame = proprio_frame(state, cmd, prev_action)
    if not (np.isfinite(frame).all() and np.isfinite(scan).all()):
        raise InvalidStateError("non-finite observation inputs")
    buffer.push(frame)
    n = frame.shape[0]
    flat = np.concatenate([buffer.frames.reshape(n, -1), scan], axis=1)
    return Observation(flat=flat)


@dataclass
class ContactWindow:
    """Contact statistics aggregated over one control step's substeps."""

    stumble_events: np.ndarray  # (n,) count over substeps and feet
    slip: np.ndarray            # (n,) mean of sum_feet in_contact * vx^2
    force_excess: np.ndarray    # (n,) mean of sum_feet max(0, fz - thresh)^2
    contact_frac: np.ndarray    # (n,) fraction of substeps with any contact
    air_credit: np.ndarray      # (n,) touchdown air-time credits
    energy: np.ndarray          # (n,) sum |tau * dq| * dt over substeps

    @classmethod
    def zeros(cls, n: int) -> "ContactWindow":
        return cls(*(np.zeros(n) for _ in range(6)))


@dataclass
class RewardBreakdown:
    terms: dict[str, np.ndarray]
    total: np.ndarray

    @classmethod
    def combine(cls, terms: dict[str, np.ndarray]) -> "RewardBreakdown":
        total = sum(REWARD_WEIGHTS[k] * v for k, v in terms.items())
        return cls(terms=terms, total=total)


def _kernel(err: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-(err / sigma) ** 2)


def tracking_kernels(model: ph.RobotModel, state: ph.RobotState, cmd: Command,
                     terrain_h: np.ndarray) -> dict[str, np.ndarray]:
    """Pre-weight exponential tracking terms, shared by rewards and curriculum."""
    torso_pitch = state.pitch + state.q[:, 0]
    arm_err2 = ((state.q[:, 5:] - cmd.q_arm_star) ** 2).sum(axis=1)
    return {
        "lin_vel": _kernel(state.base_vx - cmd.v_x, SIGMA_V),
        "height": _kernel(state.base_z - terrain_h - cmd.h_base, SIGMA_H),
        "torso_pitch": _kernel(torso_pitch - cmd.torso_pitch, SIGMA_PITCH),
        "arm": np.exp(-arm_err2 / SIGMA_ARM**2),
    }


def compute_reward(model: ph.RobotModel, prev: ph.RobotState, nxt: ph.RobotState,
                   cmd: Command, contact: ContactWindow, action: np.ndarray,
                   prev_action: np.ndarray, dt: float, terrain_h: np.ndarray,
                   terminated: np.ndarray) -> RewardBreakdown:
    """Weighted sum of the tracking and regularization terms."""
    kernels = tracking_kernels(model, nxt, cmd, terrain_h)
    torso_pitch = nxt.pitch + nxt.q[:, 0]
    torso_rate = nxt.pitch_rate + nxt.dq[:, 0]
    rate_des = np.clip(PITCH_RATE_GAIN * (cmd.torso_pitch - torso_pitch),
                       -PITCH_RATE_CAP, PITCH_RATE_CAP)
    nominal = model.nominal_q
    dev = ((nxt.q[:, [0, 1, 3]] - nominal[[0, 1, 3]]) ** 2).sum(axis=1)
    terms = {
        "lin_vel": kernels["lin_vel"],
        "pitch_rate": _kernel(torso_rate - rate_des, SIGMA_PITCH_RATE),
        "height": kernels["height"],
        "torso_pitch": kernels["torso_pitch"],
        "arm": kernels["arm"],
        "termination": terminated.astype(np.float64),
        "action_rate": ((action - prev_action) ** 2).sum(axis=1),
        "energy": contact.energy,
        "joint_deviation": np.where(cmd.mode < 0.5, dev, 0.0),
        "feet_stumble": contact.stumble_events,
        "feet_air_time": contact.air_credit,
        "feet_slippage": contact.slip,
        "feet_force": contact.force_excess,
        "no_fly": contact.contact_frac,
    }
    return RewardBreakdown.combine(terms)


def check_termination(state: ph.RobotState, cmd: Command, terrain_h: np.ndarray,
                      fault: np.ndarray) -> np.ndarray:
    """Fallen, excessively tilted relative to the command, or faulted."""
    fallen = state.base_z - terrain_h < FALL_HEIGHT
    tilted = np.abs(state.pitch - cmd.torso_pitch) > STUMBLE_TILT_LIMIT
    return fallen | tilted | fault


class LocoEnv:
    """Vectorized environment; the trainer steps all envs in lockstep."""

    def __init__(self, model: ph.RobotModel, cfg: EnvConfig,
                 curriculum: CurriculumState | None = None):
        self.model = model
        self.cfg = cfg
        self.n = cfg.num_envs
        self.curriculum = curriculum or initial_curriculum(cfg)
        self.rngs = [np.random.Generator(np.random.PCG64([cfg.seed, i]))
                     for i in range(self.n)]
        self.terrains = tr.TerrainBatch([tr.generate("flat", 0.0, 0)] * self.n)
        self.state = ph.standing_state(model, self.n)
        self.command = Command.zeros(self.n, model)
        self.buffer = FrameBuffer(self.n)
        self.prev_action = np.zeros((self.n, ph.NUM_JOINTS))
        self.steps = np.zeros(self.n, dtype=np.int64)
        self.done = np.ones(self.n, dtype=bool)
        self.air_time = np.zeros((self.n, 2))
        self.was_contact = np.zeros((self.n, 2), dtype=bool)
        self._weight = model.total_mass * model.gravity
        self._episode = {k: np.zeros(self.n) for k in
                         ("return", "lin_vel", "height", "torso_pitch", "arm",
                          "abs_v", "abs_h", "abs_pitch", "abs_arm", "stumble_steps")}
        self._obs = None

    # -- lifecycle ---------------------------------------------------------

    def reset(self) -> Observation:
        self.reset_envs(np.arange(self.n))
        return self._obs

    def reset_envs(self, idx) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if idx.size == 0:
            return
        if self.cfg.fixed_terrain is not None:
            fixed = tr.from_config(self.cfg.fixed_terrain)
            self.terrains.replace(idx, [fixed] * idx.size)
        else:
            mix_kinds = list(self.cfg.terrain_mix.keys())
            mix_w = np.array([self.cfg.terrain_mix[k] for k in mix_kinds],
                             dtype=np.float64)
            mix_w = mix_w / mix_w.sum()
            new_terrains = []
            for i in idx:
                rng = self.rngs[i]
                kind = mix_kinds[int(rng.choice(len(mix_kinds), p=mix_w))]
                difficulty = float(rng.uniform(0.0, self.curriculum.alpha_terrain)) \
                    if self.curriculum.alpha_terrain > 0 else 0.0
                new_terrains.append(tr.generate(kind, difficulty,
                                                int(rng.integers(2**31))))
            self.terrains.replace(idx, new_terrains)

        ground = self.terrains.height(np.zeros(self.n))[idx]
        self.state.invalidate_cache()
        for j, i in enumerate(idx):
            rng = self.rngs[i]
            self.command.set_row(i, sample_command(self.curriculum, rng, self.model,
                                                   self.cfg.v_max))
            # spawn standing at the commanded height so tracking starts on-goal;
            # moving commands spawn mid-stride at the commanded speed, so the
            # cheapest continuation is to keep walking (gait bootstrap)
            h0 = float(np.clip(self.command.h_base[i], self.model.min_base_height,
                               self.model.max_base_height))
            self.state.coords[i] = 0.0
            self.state.vels[i] = rng.uniform(-0.05, 0.05, size=ph.NUM_COORDS)
            self.state.vels[i, 0] += self.command.v_x[i]
            self.state.coords[i, 1] = h0 + ground[j]
            self.state.coords[i, 3:] = self.model.nominal_q + rng.uniform(
                -0.05, 0.05, size=ph.NUM_JOINTS)
            legs = self.model.leg_pose_for_height(np.array([h0]))[0]
            v_cmd = float(self.command.v_x[i])
            if abs(v_cmd) >= 0.2:
                legs = legs + self._gait_pose(rng, v_cmd, i)
            self.state.coords[i, 4:8] = legs + rng.uniform(-0.05, 0.05, size=4)
        self._settle_feet(idx)
        self.steps[idx] = 0
        self.done[idx] = False
        self.prev_action[idx] = 0.0
        self.air_time[idx] = 0.0
        self.was_contact[idx] = True
        for acc in self._episode.values():
            acc[idx] = 0.0

        frame = proprio_frame(self.state, self.command, self.prev_action)
        self._apply_frame_noise(frame, idx)
        self.buffer.reset_envs(idx, frame[idx])
        if self._obs is None:
            self._obs = Observation(flat=np.zeros((self.n, OBS_WIDTH)))
        scan = self._scan(idx)
        self._obs.flat[idx] = np.concatenate(
            [self.buffer.frames[idx].reshape(idx.size, -1), scan[idx]], axis=1)

    # -- helpers -----------------------------------------------------------

    def _gait_pose(self, rng, v_cmd: float, i: int) -> np.ndarray:
        """Leg-angle offsets and hip rates for a random phase of a nominal
        walk cycle at the commanded speed."""
        s = np.sign(v_cmd)
        speed = abs(v_cmd)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        freq = 2.0 * np.pi * (1.2 + 0.6 * speed)
        amp = 0.12 + 0.18 * speed
        swing = np.sin(phase)
        offsets = np.zeros(4)
        offsets[0] = s * amp * swing
        offsets[2] = -s * amp * swing
        # bend the knee of whichever leg is swinging forward (foot clearance)
        rate = np.cos(phase)
        if s * rate >= 0:
            offsets[1] = 1.5 * amp * abs(rate)
        else:
            offsets[3] = 1.5 * amp * abs(rate)
        self.state.vels[i, 4] = s * amp * freq * rate
        self.state.vels[i, 6] = -s * amp * freq * rate
        return offsets

    def _settle_feet(self, idx: np.ndarray) -> None:
        """Shift each spawned base so its lowest foot rests on the terrain
        with the static spring preload."""
        feet = ph.foot_positions(self.model, self.state.coords[idx])
        query = np.zeros((self.n, 2))
        query[idx] = feet[:, :, 0]
        ground = self.terrains.height(query)[idx]
        clearance = (feet[:, :, 1] - ground).min(axis=1)
        preload = 0.5 * self.model.total_mass * self.model.gravity / self.model.k_contact
        self.state.coords[idx, 1] -= clearance + preload

    def _apply_frame_noise(self, frame: np.ndarray, idx: np.ndarray) -> None:
        if not self.cfg.noise:
            return
        for i in idx:
            rng = self.rngs[i]
            frame[i, :7] += rng.uniform(-0.01, 0.01, 7)
            frame[i, 7:15] += rng.uniform(-0.1, 0.1, 8)

    def _scan(self, idx: np.ndarray) -> np.ndarray:
        scan = self.terrains.scans(self.state.base_x, self.state.base_z)
        if self.cfg.noise:
            for i in idx:
                scan[i] += self.rngs[i].uniform(-0.02, 0.02, tr.SCAN_SAMPLES)
            scan = np.clip(scan, -tr.SCAN_CLIP, tr.SCAN_CLIP)
        return scan

    def _push_observation(self):
        frame = proprio_frame(self.state, self.command, self.prev_action)
        all_idx = np.arange(self.n)
        self._apply_frame_noise(frame, all_idx)
        self.buffer.push(frame)
        flat = np.concatenate([self.buffer.frames.reshape(self.n, -1),
                               self._scan(all_idx)], axis=1)
        self._obs = Observation(flat=flat)

    def observation(self) -> Observation:
        return self._obs

    @property
    def true_base_velocity(self) -> np.ndarray:
        return self.state.vels[:, :2].copy()

    # -- snapshot/restore (training resume must be bit-exact) ---------------

    def get_state(self) -> dict:
        from dataclasses import asdict
        return {
            "arrays": {
                "coords": self.state.coords.copy(),
                "vels": self.state.vels.copy(),
                "frames": self.buffer.frames.copy(),
                "prev_action": self.prev_action.copy(),
                "steps": self.steps.copy(),
                "done": self.done.copy(),
                "air_time": self.air_time.copy(),
                "was_contact": self.was_contact.copy(),
                "obs": self._obs.flat.copy(),
                "cmd_v": self.command.v_x.copy(),
                "cmd_h": self.command.h_base.copy(),
                "cmd_pitch": self.command.torso_pitch.copy(),
                "cmd_arm": self.command.q_arm_star.copy(),
                "cmd_mode": self.command.mode.copy(),
                **{f"ep.{k}": v.copy() for k, v in self._episode.items()},
            },
            "terrains": [asdict(t) for t in self.terrains.terrains],
            "rng_states": [r.bit_generator.state for r in self.rngs],
            "curriculum": asdict(self.curriculum),
        }

    def set_state(self, snap: dict):
        arrays = snap["arrays"]
        self.state.invalidate_cache()
        self.state.coords[:] = arrays["coords"]
        self.state.vels[:] = arrays["vels"]
        self.buffer.frames[:] = arrays["frames"]
        self.prev_action[:] = arrays["prev_action"]
        self.steps[:] = arrays["steps"]
        self.done[:] = arrays["done"]
        self.air_time[:] = arrays["air_time"]
        self.was_contact[:] = arrays["was_contact"]
        self._obs = Observation(flat=np.array(arrays["obs"]))
        self.command.v_x[:] = arrays["cmd_v"]
        self.command.h_base[:] = arrays["cmd_h"]
        self.command.torso_pitch[:] = arrays["cmd_pitch"]
        self.command.q_arm_star[:] = arrays["cmd_arm"]
        self.command.mode[:] = arrays["cmd_mode"]
        for k in self._episode:
            self._episode[k][:] = arrays[f"ep.{k}"]
        terrains = []
        for d in snap["terrains"]:
            d = dict(d)
            d["rough_freqs"] = tuple(d["rough_freqs"])
            d["rough_phases"] = tuple(d["rough_phases"])
            terrains.append(tr.Terrain(**d))
        self.terrains = tr.TerrainBatch(terrains)
        for r, st in zip(self.rngs, snap["rng_states"]):
            r.bit_generator.state = st
        self.curriculum = CurriculumState(**snap["curriculum"])

    # -- stepping ----------------------------------------------------------

    def step(self, action: np.ndarray):
        """Apply one 50 Hz control step (10 physics substeps)."""
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.n, ph.NUM_JOINTS):
            raise ContractError(f"action shape {action.shape} != "
                                f"{(self.n, ph.NUM_JOINTS)}")
        if not np.isfinite(action).all():
            raise ContractError("non-finite action")
        if np.abs(action).max() > 1.0 + 1e-9:
            raise ContractError("action outside [-1, 1]")
        if self.done.any() and not self.cfg.auto_reset:
            raise ContractError("stepping envs that are done; reset first")

        # residual actions around a command-conditioned reference pose; the arm
        # residual rides directly on the commanded arm target
        ref = self.model.reference_pose(self.command.h_base,
                                        self.command.torso_pitch,
                                        self.command.q_arm_star)
        q_des = ref + ACTION_SCALE * action

        prev_state = self.state.copy()
        window = ContactWindow.zeros(self.n)
        fault = np.zeros(self.n, dtype=bool)
        force_thresh = FOOT_FORCE_FACTOR * self._weight
        for _ in range(DECIMATION):
            tau = ph.pd_torque(self.model, q_des, self.state)
            window.energy += (np.abs(tau * self.state.dq)).sum(axis=1) * ph.PHYSICS_DT
            self.state, contact, sub_fault = ph.step(
                self.model, self.state, tau, self.terrains, raise_on_fault=False)
            fault |= sub_fault
            stumble = ph.detect_stumble(contact)
            window.stumble_events += stumble.sum(axis=1)
            window.slip += (contact.in_contact * contact.vel[:, :, 0] ** 2).sum(axis=1)
            window.force_excess += (np.maximum(0.0, contact.fz - force_thresh) ** 2
                                    ).sum(axis=1)
            window.contact_frac += contact.in_contact.any(axis=1)
            touchdown = contact.in_contact & ~self.was_contact
            # stepping credit only applies when motion is commanded; with a
            # stand command, lifting feet should not be rewarded or forced
            moving = np.abs(self.command.v_x) >= AIR_TIME_CMD_GATE
            window.air_credit += moving * np.where(
                touchdown, np.maximum(self.air_time - AIR_TIME_TARGET,
                                      AIR_TIME_FLOOR), 0.0).sum(axis=1)
            self.air_time = np.where(contact.in_contact, 0.0,
                                     self.air_time + ph.PHYSICS_DT)
            self.was_contact = contact.in_contact
        window.slip /= DECIMATION
        window.force_excess /= DECIMATION
        window.contact_frac /= DECIMATION

        self.steps += 1
        terrain_h = self.terrains.height(self.state.base_x)
        terminated = check_termination(self.state, self.command, terrain_h, fault)
        timeout = (self.steps >= self.cfg.episode_steps) & ~terminated
        done = terminated | timeout

        reward = compute_reward(self.model, prev_state, self.state, self.command,
                                window, action, self.prev_action, CONTROL_DT,
                                terrain_h, terminated)
        if self.cfg.debug:
            expect = sum(REWARD_WEIGHTS[k] * v for k, v in reward.terms.items())
            assert np.allclose(reward.total, expect), "reward total mismatch"

        kern = tracking_kernels(self.model, self.state, self.command, terrain_h)
        ep = self._episode
        ep["return"] += reward.total
        for k in ("lin_vel", "height", "torso_pitch", "arm"):
            ep[k] += kern[k]
        ep["abs_v"] += np.abs(self.state.base_vx - self.command.v_x)
        ep["abs_h"] += np.abs(self.state.base_z - terrain_h - self.command.h_base)
        torso_pitch = self.state.pitch + self.state.q[:, 0]
        ep["abs_pitch"] += np.abs(torso_pitch - self.command.torso_pitch)
        ep["abs_arm"] += np.abs(self.state.q[:, 5:] - self.command.q_arm_star
                                ).mean(axis=1)
        ep["stumble_steps"] += (window.stumble_events > 0)

        episodes = []
        if done.any():
            for i in np.flatnonzero(done):
                steps = max(int(self.steps[i]), 1)
                episodes.append({
                    "env": int(i),
                    "length": int(self.steps[i]),
                    "timeout": bool(timeout[i]),
                    "fault": bool(fault[i]),
                    "return": float(ep["return"][i]),
                    "kernels": {k: float(ep[k][i] / steps) for k in
                                ("lin_vel", "height", "torso_pitch", "arm")},
                    "errors": {"v": float(ep["abs_v"][i] / steps),
                               "h": float(ep["abs_h"][i] / steps),
                               "pitch": float(ep["abs_pitch"][i] / steps),
                               "arm": float(ep["abs_arm"][i] / steps)},
                    "stumble_rate": float(ep["stumble_steps"][i] / steps),
                    "terrain": self.terrains.terrains[i].kind,
                })
        self.done = done.copy()
        self.prev_action = action.copy()

        resample = (~done) & (self.steps % self.cfg.resample_steps == 0) \
            & (self.steps > 0) & (self.steps < self.cfg.episode_steps)
        for i in np.flatnonzero(resample):
            self.command.set_row(i, sample_command(self.curriculum, self.rngs[i],
                                                   self.model, self.cfg.v_max))

        self._push_observation()
        info = {"timeout": timeout, "fault": fault, "episodes": episodes,
                "true_vel": self.true_base_velocity,
                "contact": window, "terrain_h": terrain_h}
        if self.cfg.auto_reset and done.any():
            idx = np.flatnonzero(done)
            # pre-reset observation/velocity, needed for timeout bootstrapping
            info["final_obs"] = self._obs.flat[idx].copy()
            info["final_vel"] = self.state.vels[idx, :2].copy()
            self.reset_envs(idx)
        return self._obs, reward, done, info
