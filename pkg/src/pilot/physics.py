"""Sagittal-plane rigid-body dynamics for a torso + two point-foot legs + 2-DoF arm.

Generalized coordinates (10): [base_x, base_z, base_pitch, q0..q6] with joint
order [torso_pitch, L_hip, L_knee, R_hip, R_knee, shoulder, elbow].

Each link's center of mass is a sum of rotated offsets c * (sin a, cos a)
where every angle a is a fixed signed combination of coordinates.  That
structure yields closed-form Jacobians and velocity-product terms, so the
mass matrix and bias forces assemble from a handful of einsums and the
whole state batch advances with two dense solves per substep.

The velocity update is done in momentum form (p += dt * generalized force,
with velocities re-derived from the mass matrix at the new configuration).
Coordinates x and z are cyclic, so total linear momentum is conserved to
solver roundoff when no external force acts on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .terrain import Terrain, TerrainBatch

NUM_JOINTS = 7
NUM_COORDS = 10
JOINT_NAMES = ("torso_pitch", "l_hip", "l_knee", "r_hip", "r_knee", "shoulder", "elbow")

GRAVITY = 9.81
PHYSICS_DT = 1.0 / 500.0

# Angle channels: base pitch plus one world angle per link.
_NA = 8
_A_BASE, _A_TORSO, _A_THIGH_L, _A_SHANK_L, _A_THIGH_R, _A_SHANK_R, _A_UARM, _A_FARM = range(_NA)
# Bodies carrying mass.
_NB = 7
_B_TORSO, _B_THIGH_L, _B_SHANK_L, _B_THIGH_R, _B_SHANK_R, _B_UARM, _B_FARM = range(_NB)


class SimulationFault(RuntimeError):
    """Raised when integration produces a non-finite state."""

    def __init__(self, state, indices):
        self.state = state
        self.indices = np.atleast_1d(indices)
        super().__init__(f"non-finite state in envs {self.indices.tolist()}")


@dataclass
class RobotModel:
    """Kinematic/dynamic parameters of the planar surrogate robot."""

    torso_len: float = 0.4
    thigh_len: float = 0.3
    shank_len: float = 0.3
    upper_arm_len: float = 0.2
    forearm_len: float = 0.2
    pelvis_offset: float = 0.2          # hips sit this far below the base origin

    torso_mass: float = 12.0
    thigh_mass: float = 2.0
    shank_mass: float = 1.5
    upper_arm_mass: float = 0.8
    forearm_mass: float = 0.5

    kp: tuple = (80.0, 60.0, 60.0, 60.0, 60.0, 30.0, 30.0)
    kd: tuple = (2.0, 1.5, 1.5, 1.5, 1.5, 1.0, 1.0)
    tau_max: tuple = (60.0, 60.0, 60.0, 60.0, 60.0, 20.0, 20.0)
    q_lo: tuple = (-0.5, -1.5, 0.05, -1.5, 0.05, -2.0, -2.0)
    q_hi: tuple = (1.6, 1.5, 2.5, 1.5, 2.5, 2.0, 2.0)
    joint_damping: float = 0.2

    k_contact: float = 4.0e4
    d_contact: float = 400.0
    k_tangent: float = 2.0e3
    friction: float = 0.8
    gravity: float = GRAVITY

    nominal_height: float = 0.76
    stance_spread: float = 0.12         # fore/aft foot offset of the nominal stance
    arm_nominal: tuple = (0.3, 0.6)

    def __post_init__(self):
        for name in ("torso_len", "thigh_len", "shank_len", "upper_arm_len", "forearm_len",
                     "torso_mass", "thigh_mass", "shank_mass", "upper_arm_mass", "forearm_mass"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if np.any(np.asarray(self.kp) <= 0) or np.any(np.asarray(self.kd) < 0):
            raise ValueError("PD gains must be positive")
        self._build()

    def _build(self):
        self.kp_arr = np.asarray(self.kp, dtype=np.float64)
        self.kd_arr = np.asarray(self.kd, dtype=np.float64)
        self.tau_max_arr = np.asarray(self.tau_max, dtype=np.float64)
        self.q_lo_arr = np.asarray(self.q_lo, dtype=np.float64)
        self.q_hi_arr = np.asarray(self.q_hi, dtype=np.float64)
        self.masses = np.array([self.torso_mass, self.thigh_mass, self.shank_mass,
                                self.thigh_mass, self.shank_mass,
                                self.upper_arm_mass, self.forearm_mass])
        lens = np.array([self.torso_len, self.thigh_len, self.shank_len,
                         self.thigh_len, self.shank_len,
                         self.upper_arm_len, self.forearm_len])
        self.inertias = self.masses * lens**2 / 12.0    # thin rods about COM
        self.total_mass = float(self.masses.sum())

        # Angle channels as signed combinations of coordinates (rows of A).
        A = np.zeros((_NA, NUM_COORDS))
        A[:, 2] = 1.0                       # every channel carries base pitch
        A[_A_TORSO, 3] = 1.0
        A[_A_THIGH_L, 4] = -1.0
        A[_A_SHANK_L, 4] = -1.0
        A[_A_SHANK_L, 5] = 1.0
        A[_A_THIGH_R, 6] = -1.0
        A[_A_SHANK_R, 6] = -1.0
        A[_A_SHANK_R, 7] = 1.0
        A[_A_UARM, 3] = 1.0
        A[_A_UARM, 8] = -1.0
        A[_A_FARM, 3] = 1.0
        A[_A_FARM, 8] = -1.0
        A[_A_FARM, 9] = -1.0
        self.A = A

        # COM offsets: position = (x, z) + sum_k C[b, k] * (sin a_k, cos a_k).
        C = np.zeros((_NB, _NA))
        C[_B_TORSO, _A_TORSO] = 0.5 * self.torso_len
        for b_th, b_sh, a_th, a_sh in ((_B_THIGH_L, _B_SHANK_L, _A_THIGH_L, _A_SHANK_L),
                                       (_B_THIGH_R, _B_SHANK_R, _A_THIGH_R, _A_SHANK_R)):
            C[b_th, _A_BASE] = -self.pelvis_offset
            C[b_th, a_th] = -0.5 * self.thigh_len
            C[b_sh, _A_BASE] = -self.pelvis_offset
            C[b_sh, a_th] = -self.thigh_len
            C[b_sh, a_sh] = -0.5 * self.shank_len
        C[_B_UARM, _A_TORSO] = self.torso_len
        C[_B_UARM, _A_UARM] = -0.5 * self.upper_arm_len
        C[_B_FARM, _A_TORSO] = self.torso_len
        C[_B_FARM, _A_UARM] = -self.upper_arm_len
        C[_B_FARM, _A_FARM] = -0.5 * self.forearm_len
        self.C = C

        F = np.zeros((2, _NA))
        F[0, _A_BASE] = -self.pelvis_offset
        F[0, _A_THIGH_L] = -self.thigh_len
        F[0, _A_SHANK_L] = -self.shank_len
        F[1, _A_BASE] = -self.pelvis_offset
        F[1, _A_THIGH_R] = -self.thigh_len
        F[1, _A_SHANK_R] = -self.shank_len
        self.F = F

        # Constant angular part of the mass matrix.
        body_chan = (_A_TORSO, _A_THIGH_L, _A_SHANK_L, _A_THIGH_R, _A_SHANK_R, _A_UARM, _A_FARM)
        self.M_ang = np.einsum("b,bi,bj->ij",
                               self.inertias, A[list(body_chan)], A[list(body_chan)])
        self.body_chan = body_chan
        self.nominal_q = self._nominal_pose()
        self.stand_targets = self._stand_targets()
        self._build_com_shift_table()

    def _pose_for_feet(self, dx_front: float, dx_back: float,
                       height: float | None = None) -> np.ndarray:
        """Standing pose with feet at the given fore/aft offsets from the base."""
        drop = (self.nominal_height if height is None else height) - self.pelvis_offset
        q = np.zeros(NUM_JOINTS)
        for dx, (i_hip, i_knee) in ((dx_front, (1, 2)), (dx_back, (3, 4))):
            chord = float(np.hypot(dx, drop))
            reach = self.thigh_len + self.shank_len
            if chord > 0.999 * reach:
                chord = 0.999 * reach
            cos_knee = (chord**2 - self.thigh_len**2 - self.shank_len**2) \
                / (2.0 * self.thigh_len * self.shank_len)
            knee = float(np.arccos(np.clip(cos_knee, -1.0, 1.0)))
            beta = float(np.arctan2(dx, drop))
            q[i_hip] = beta + 0.5 * knee
            q[i_knee] = knee
        q[5], q[6] = self.arm_nominal
        return q

    def _nominal_pose(self) -> np.ndarray:
        """Split-stance standing pose, feet centered on the whole-body COM."""
        shift = 0.0
        q = self._pose_for_feet(self.stance_spread, -self.stance_spread)
        for _ in range(4):
            coords = np.zeros((1, NUM_COORDS))
            coords[0, 1] = self.nominal_height
            coords[0, 3:] = q
            px, _ = com_positions(self, coords)
            shift = float((self.masses * px[0]).sum() / self.total_mass)
            q = self._pose_for_feet(shift + self.stance_spread, shift - self.stance_spread)
        self._nominal_com_shift = shift
        dx = abs(shift) + self.stance_spread
        len_min = np.sqrt(self.thigh_len**2 + self.shank_len**2
                          + 2 * self.thigh_len * self.shank_len * np.cos(self.q_hi_arr[2]))
        len_max = np.sqrt(self.thigh_len**2 + self.shank_len**2
                          + 2 * self.thigh_len * self.shank_len * np.cos(self.q_lo_arr[2]))
        self.min_base_height = self.pelvis_offset \
            + float(np.sqrt(max(len_min**2 - dx**2, 1e-4))) + 0.01
        self.max_base_height = self.pelvis_offset \
            + float(np.sqrt(max(len_max**2 - dx**2, 1e-4))) - 0.005
        return q

    def _static_offsets(self, pose: np.ndarray, height: float) -> np.ndarray:
        """tau_static / kp for holding `pose` at rest: PD toward pose + offsets
        reproduces the pose as the closed-loop equilibrium instead of sagging."""
        coords = np.zeros((1, NUM_COORDS))
        coords[0, 1] = height
        coords[0, 3:] = pose
        feet = foot_positions(self, coords)
        x_f, x_b = feet[0, 0, 0], feet[0, 1, 0]
        px, _ = com_positions(self, coords)
        com_x = float((self.masses * px[0]).sum() / self.total_mass)
        weight = self.total_mass * self.gravity
        span = x_f - x_b
        fz_front = weight * (com_x - x_b) / span if abs(span) > 1e-9 else 0.5 * weight
        fz = np.array([[fz_front, weight - fz_front]])

        jx, jz, _, _ = _foot_jacobians(self, coords)
        bjx, bjz, _, _ = _body_jacobians(self, coords)
        grav = -self.gravity * np.einsum("b,nbi->ni", self.masses, bjz)
        q_contact = np.einsum("nfi,nf->ni", jz, fz)
        tau_static = -(grav + q_contact)[0, 3:]
        return tau_static / self.kp_arr

    def _stand_targets(self) -> np.ndarray:
        offsets = self._static_offsets(self.nominal_q, self.nominal_height)
        return np.clip(self.nominal_q + offsets, self.q_lo_arr, self.q_hi_arr)

    def _build_com_shift_table(self):
        """Per-height COM fore/aft offset and gravity-compensation offsets; a
        crouched body carries its COM and static joint torques differently."""
        heights = np.linspace(self.min_base_height, self.max_base_height, 25)
        shifts = np.empty_like(heights)
        comps = np.empty((heights.size, NUM_JOINTS))
        shift = self._nominal_com_shift
        for i, h in enumerate(heights):
            legs = None
            for _ in range(3):
                legs = self.leg_pose_for_height(np.array([h]), com_shift=shift)[0]
                coords = np.zeros((1, NUM_COORDS))
                coords[0, 1] = h
                coords[0, 3] = 0.0
                coords[0, 4:8] = legs
                coords[0, 8:] = self.arm_nominal
                px, _ = com_positions(self, coords)
                shift = float((self.masses * px[0]).sum() / self.total_mass)
            shifts[i] = shift
            pose = np.concatenate([[0.0], legs, self.arm_nominal])
            comps[i] = self._static_offsets(pose, h)
        self._com_shift_heights = heights
        self._com_shift_values = shifts
        self._comp_values = comps

    def com_shift_at(self, heights: np.ndarray) -> np.ndarray:
        return np.interp(heights, self._com_shift_heights, self._com_shift_values)

    def static_comp_at(self, heights: np.ndarray) -> np.ndarray:
        """(n, 7) gravity-compensation target offsets for each base height."""
        heights = np.asarray(heights, dtype=np.float64)
        out = np.empty(heights.shape + (NUM_JOINTS,))
        for j in range(NUM_JOINTS):
            out[..., j] = np.interp(heights, self._com_shift_heights,
                                    self._comp_values[:, j])
        return out

    def leg_pose_for_height(self, heights: np.ndarray,
                            com_shift=None) -> np.ndarray:
        """Vectorized split-stance leg angles (hipL, kneeL, hipR, kneeR) that
        place the base at the given heights over flat ground."""
        heights = np.clip(np.asarray(heights, dtype=np.float64),
                          self.min_base_height, self.max_base_height)
        drop = heights - self.pelvis_offset
        if com_shift is None:
            com_shift = self.com_shift_at(heights) \
                if hasattr(self, "_com_shift_values") else self._nominal_com_shift
        out = np.empty(heights.shape + (4,))
        for col, dx in ((0, com_shift + self.stance_spread),
                        (2, com_shift - self.stance_spread)):
            chord = np.minimum(np.hypot(dx, drop),
                               0.999 * (self.thigh_len + self.shank_len))
            cos_knee = (chord**2 - self.thigh_len**2 - self.shank_len**2) \
                / (2.0 * self.thigh_len * self.shank_len)
            knee = np.arccos(np.clip(cos_knee, -1.0, 1.0))
            beta = np.arctan2(dx, drop)
            out[..., col] = beta + 0.5 * knee
            out[..., col + 1] = knee
        return out

    def reference_pose(self, h_cmd: np.ndarray, pitch_cmd: np.ndarray,
                       q_arm_star: np.ndarray) -> np.ndarray:
        """Command-conditioned PD reference: legs posed for the commanded
        height, torso biased toward the commanded pitch, arm at its target.

        Policy actions are residuals around this pose, mirroring the arm's
        residual parameterization; gravity-compensation offsets carry over
        from the nominal stance.
        """
        n = np.asarray(h_cmd).shape[0]
        ref = np.empty((n, NUM_JOINTS))
        h = np.clip(h_cmd, self.min_base_height, self.max_base_height)
        comp = self.static_comp_at(h)
        ref[:, 0] = 0.75 * pitch_cmd + comp[:, 0]
        legs = self.leg_pose_for_height(h)
        ref[:, 1:5] = legs + comp[:, 1:5]
        ref[:, 5:] = q_arm_star
        return np.clip(ref, self.q_lo_arr, self.q_hi_arr)

    def config_dict(self) -> dict:
        out = {}
        for name in ("torso_len", "thigh_len", "shank_len", "upper_arm_len", "forearm_len",
                     "pelvis_offset", "torso_mass", "thigh_mass", "shank_mass",
                     "upper_arm_mass", "forearm_mass", "joint_damping", "k_contact",
                     "d_contact", "k_tangent", "friction", "gravity", "nominal_height",
                     "stance_spread"):
            out[f"model.{name}"] = getattr(self, name)
        for name in ("kp", "kd", "tau_max", "q_lo", "q_hi", "arm_nominal"):
            out[f"model.{name}"] = list(getattr(self, name))
        return out

    @classmethod
    def from_config(cls, cfg: dict) -> "RobotModel":
        kwargs = {}
        for key, val in cfg.items():
            if key.startswith("model."):
                name = key.split(".", 1)[1]
                kwargs[name] = tuple(val) if isinstance(val, (list, tuple)) else val
        return cls(**kwargs)


@dataclass
class RobotState:
    """Batched generalized coordinates/velocities; index [i] views env i."""

    coords: np.ndarray  # (n, 10)
    vels: np.ndarray    # (n, 10)

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def base_x(self):
        return self.coords[:, 0]

    @property
    def base_z(self):
        return self.coords[:, 1]

    @property
    def pitch(self):
        return self.coords[:, 2]

    @property
    def base_vx(self):
        return self.vels[:, 0]

    @property
    def base_vz(self):
        return self.vels[:, 1]

    @property
    def pitch_rate(self):
        return self.vels[:, 2]

    @property
    def q(self):
        return self.coords[:, 3:]

    @property
    def dq(self):
        return self.vels[:, 3:]

    def copy(self) -> "RobotState":
        return RobotState(self.coords.copy(), self.vels.copy())

    def invalidate_cache(self):
        """Must be called after mutating coords in place (see step's mass cache)."""
        if hasattr(self, "_mass_cache"):
            del self._mass_cache

    def is_finite(self) -> np.ndarray:
        return np.isfinite(self.coords).all(axis=1) & np.isfinite(self.vels).all(axis=1)

    @classmethod
    def zeros(cls, n: int) -> "RobotState":
        return cls(np.zeros((n, NUM_COORDS)), np.zeros((n, NUM_COORDS)))


@dataclass
class ContactReport:
    """Per-foot contact forces; fz >= 0 and |fx| <= friction * fz always hold."""

    in_contact: np.ndarray  # (n, 2) bool
    fz: np.ndarray          # (n, 2)
    fx: np.ndarray          # (n, 2)
    pos: np.ndarray         # (n, 2, 2) foot (x, z)
    vel: np.ndarray         # (n, 2, 2) foot (vx, vz)


def _angles(model: RobotModel, coords: np.ndarray) -> np.ndarray:
    return coords @ model.A.T


def _body_jacobians(model: RobotModel, coords: np.ndarray):
    """Jacobians of body COMs: (n, nb, 10) for x and z components."""
    al = _angles(model, coords)
    sa, ca = np.sin(al), np.cos(al)
    jx = np.matmul(model.C[None, :, :] * ca[:, None, :], model.A)
    jz = np.matmul(model.C[None, :, :] * -sa[:, None, :], model.A)
    jx[:, :, 0] += 1.0
    jz[:, :, 1] += 1.0
    return jx, jz, sa, ca


def _foot_jacobians(model: RobotModel, coords: np.ndarray):
    al = _angles(model, coords)
    sa, ca = np.sin(al), np.cos(al)
    jx = np.matmul(model.F[None, :, :] * ca[:, None, :], model.A)
    jz = np.matmul(model.F[None, :, :] * -sa[:, None, :], model.A)
    jx[:, :, 0] += 1.0
    jz[:, :, 1] += 1.0
    px = coords[:, 0:1] + sa @ model.F.T
    pz = coords[:, 1:2] + ca @ model.F.T
    return jx, jz, px, pz


def _mass_from_jacobians(model: RobotModel, jx: np.ndarray,
                         jz: np.ndarray) -> np.ndarray:
    sq = np.sqrt(model.masses)[None, :, None]
    stacked = np.concatenate([jx * sq, jz * sq], axis=1)  # (n, 2*nb, 10)
    return np.matmul(stacked.swapaxes(1, 2), stacked) + model.M_ang


def mass_matrix(model: RobotModel, coords: np.ndarray) -> np.ndarray:
    jx, jz, _, _ = _body_jacobians(model, coords)
    return _mass_from_jacobians(model, jx, jz)


def com_positions(model: RobotModel, coords: np.ndarray):
    """Body COM (x, z) arrays of shape (n, nb)."""
    al = _angles(model, coords)
    sa, ca = np.sin(al), np.cos(al)
    px = coords[:, 0:1] + sa @ model.C.T
    pz = coords[:, 1:2] + ca @ model.C.T
    return px, pz


def foot_positions(model: RobotModel, coords: np.ndarray) -> np.ndarray:
    """(n, 2, 2): [:, foot, (x, z)]."""
    al = _angles(model, coords)
    sa, ca = np.sin(al), np.cos(al)
    px = coords[:, 0:1] + sa @ model.F.T
    pz = coords[:, 1:2] + ca @ model.F.T
    return np.stack([px, pz], axis=-1)


def pd_torque(model: RobotModel, q_des: np.ndarray, state: RobotState) -> np.ndarray:
    """tau = clip(kp * (clamp(q_des) - q) - kd * dq, +-tau_max)."""
    q_des = np.clip(q_des, model.q_lo_arr, model.q_hi_arr)
    tau = model.kp_arr * (q_des - state.q) - model.kd_arr * state.dq
    return np.clip(tau, -model.tau_max_arr, model.tau_max_arr)


def _contact_with_jac(model: RobotModel, state: RobotState, terrain):
    jx, jz, px, pz = _foot_jacobians(model, state.coords)
    vx = np.einsum("nfj,nj->nf", jx, state.vels)
    vz = np.einsum("nfj,nj->nf", jz, state.vels)
    ground = _terrain_height(terrain, px)
    pen = ground - pz
    in_contact = pen > 0.0
    fz = np.where(in_contact,
                  np.maximum(0.0, model.k_contact * pen - model.d_contact * vz),
                  0.0)
    cap = model.friction * fz
    fx = np.where(in_contact, -np.clip(model.k_tangent * vx, -cap, cap), 0.0)
    report = ContactReport(in_contact=in_contact, fz=fz, fx=fx,
                           pos=np.stack([px, pz], axis=-1),
                           vel=np.stack([vx, vz], axis=-1))
    return report, jx, jz


def contact_forces(model: RobotModel, state: RobotState, terrain) -> ContactReport:
    """Spring-damper normal force with a Coulomb cap on the tangential force."""
    report, _, _ = _contact_with_jac(model, state, terrain)
    return report


def _terrain_height(terrain, x: np.ndarray) -> np.ndarray:
    if isinstance(terrain, TerrainBatch):
        return terrain.height(x)
    return terrain.height_at(x)


def detect_stumble(report: ContactReport) -> np.ndarray:
    """Per-foot stumble: horizontal force meets vertical support, above a 1 N dead-band."""
    return report.in_contact & (np.abs(report.fx) >= report.fz) & (report.fz > 1.0)


def step(model: RobotModel, state: RobotState, tau: np.ndarray, terrain,
         dt: float = PHYSICS_DT, raise_on_fault: bool = True):
    """Advance one substep; returns (new_state, contact_report, fault_mask).

    Momentum-form update: p += dt * Q, with Q the generalized force including
    the dT/dq bias, gravity, joint torques/damping and contact forces.
    Velocities are re-derived at the new configuration so the stored pair
    (coords, vels) stays consistent with the propagated momentum.
    """
    coords, vels = state.coords, state.vels
    jx, jz, sa, ca = _body_jacobians(model, coords)
    m_mat = getattr(state, "_mass_cache", None)
    if m_mat is None:
        m_mat = _mass_from_jacobians(model, jx, jz)

    v_col = vels[:, :, None]
    vbx = np.matmul(jx, v_col)[:, :, 0]
    vbz = np.matmul(jz, v_col)[:, :, 0]
    alpha_dot = vels @ model.A.T

    # dT/dq_i = -sum_{b,k} m_b C[b,k] alpha_dot_k A[k,i] (v_b . (sin a_k, cos a_k))
    dot = vbx[:, :, None] * sa[:, None, :] + vbz[:, :, None] * ca[:, None, :]
    weighted = (model.masses[:, None] * model.C)[None, :, :] \
        * alpha_dot[:, None, :] * dot
    bias = -np.matmul(weighted.sum(axis=1), model.A)

    grav = -model.gravity * np.matmul(model.masses, jz)

    contact, cjx, cjz = _contact_with_jac(model, state, terrain)
    q_contact = np.matmul(contact.fx[:, None, :], cjx)[:, 0, :]
    q_contact += np.matmul(contact.fz[:, None, :], cjz)[:, 0, :]

    q_applied = np.zeros_like(coords)
    q_applied[:, 3:] = tau - model.joint_damping * vels[:, 3:]

    p = np.matmul(m_mat, v_col)[:, :, 0]
    p_new = p + dt * (bias + grav + q_contact + q_applied)

    v_prov = np.linalg.solve(m_mat, p_new[:, :, None])[:, :, 0]
    coords_new = coords + dt * v_prov
    m_new = mass_matrix(model, coords_new)
    vels_new = np.linalg.solve(m_new, p_new[:, :, None])[:, :, 0]

    new_state = RobotState(coords_new, vels_new)
    # the new configuration's mass matrix doubles as the next substep's input
    new_state._mass_cache = m_new
    finite = new_state.is_finite()
    fault = ~finite
    if fault.any():
        if raise_on_fault:
            raise SimulationFault(new_state, np.flatnonzero(fault))
        # Freeze faulted envs at their previous (finite) state with zero velocity.
        new_state.coords[fault] = coords[fault]
        new_state.vels[fault] = 0.0
        new_state.invalidate_cache()
    return new_state, contact, fault


def mechanical_energy(model: RobotModel, state: RobotState, terrain) -> np.ndarray:
    """Kinetic + gravitational + contact-spring energy per env."""
    m_mat = mass_matrix(model, state.coords)
    kin = 0.5 * np.einsum("ni,nij,nj->n", state.vels, m_mat, state.vels)
    _, pz = com_positions(model, state.coords)
    grav = model.gravity * (model.masses[None, :] * pz).sum(axis=1)
    feet = foot_positions(model, state.coords)
    pen = np.maximum(0.0, _terrain_height(terrain, feet[:, :, 0]) - feet[:, :, 1])
    spring = 0.5 * model.k_contact * (pen**2).sum(axis=1)
    return kin + grav + spring


class StandScript:
    """Hand-written stand controller: gravity-compensated targets plus hip
    feedback on pitch/drift and a weak world-anchored foot servo.

    The viscous-capped tangential contact force admits no true static
    equilibrium, so feet creep slowly under load; this script (like a learned
    policy) counters the creep with continuous small corrections.
    """

    def __init__(self, model: RobotModel, base_x: float = 0.0,
                 k_pitch: float = 1.73, k_rate: float = 0.274,
                 k_vel: float = 0.03, k_pos: float = 0.14,
                 k_foot: float = 0.15, clip: float = 0.32):
        self.model = model
        self.k_pitch, self.k_rate = k_pitch, k_rate
        self.k_vel, self.k_pos = k_vel, k_pos
        self.k_foot, self.clip = k_foot, clip
        coords = np.zeros((1, NUM_COORDS))
        coords[0, 0] = base_x
        coords[0, 1] = model.nominal_height
        coords[0, 3:] = model.nominal_q
        self.anchors = foot_positions(model, coords)[0, :, 0]
        self.home_x = base_x

    def __call__(self, state: RobotState) -> np.ndarray:
        m = self.model
        q_des = np.tile(m.stand_targets, (state.n, 1))
        corr = np.clip(-self.k_pitch * state.pitch - self.k_rate * state.pitch_rate
                       + self.k_vel * state.base_vx
                       + self.k_pos * (state.base_x - self.home_x),
                       -self.clip, self.clip)
        feet = foot_positions(m, state.coords)
        q_des[:, 1] += corr - np.clip(self.k_foot * (feet[:, 0, 0] - self.anchors[0]),
                                      -0.4, 0.4)
        q_des[:, 3] += corr - np.clip(self.k_foot * (feet[:, 1, 0] - self.anchors[1]),
                                      -0.4, 0.4)
        return q_des


def standing_state(model: RobotModel, n: int, terrain=None,
                   base_x: float = 0.0, settle: bool = False) -> RobotState:
    """Nominal split-stance standing state (feet just touching the ground).

    With settle=True the base is lowered by the static contact penetration
    (weight / (2 k_contact)) so the spring preload matches gravity at t=0.
    """
    st = RobotState.zeros(n)
    ground = 0.0
    if terrain is not None:
        if isinstance(terrain, TerrainBatch):
            ground = terrain.height(np.full(n, base_x))
        else:
            ground = float(terrain.height_at(base_x))
    st.coords[:, 0] = base_x
    st.coords[:, 1] = model.nominal_height + ground
    if settle:
        st.coords[:, 1] -= 0.5 * model.total_mass * model.gravity / model.k_contact
    st.coords[:, 3:] = model.nominal_q
    return st
