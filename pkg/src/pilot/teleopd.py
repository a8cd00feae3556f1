"""Live teleoperation service and headless command-script replay.

One asyncio simulation loop owns all mutable session state; network ingress
lands in a mailbox drained once per 50 Hz policy tick, and 20 Hz state
broadcasts fan out from immutable snapshots.  The first connected client
holds command authority; later clients observe.
"""

from __future__ import annotations

import asyncio
import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import physics as ph
from . import terrain as tr
from .env import (Command, EnvConfig, LocoEnv, CONTROL_DT,
                  H_MIN, H_MAX, PITCH_CMD_RANGE, V_MAX)
from .metrics import MetricsReport
from .policy import load_policy

BROADCAST_HZ = 20.0


class ScriptError(ValueError):
    """A replay script row failed to parse."""


def clamp_command_fields(model: ph.RobotModel, v_x, h_base, torso_pitch,
                         q_arm, mode) -> dict:
    bounds = model.q_hi_arr[5:]
    return {
        "v_x": float(np.clip(v_x, -V_MAX, V_MAX)),
        "h_base": float(np.clip(h_base, H_MIN, H_MAX)),
        "torso_pitch": float(np.clip(torso_pitch, *PITCH_CMD_RANGE)),
        "q_arm": [float(np.clip(q_arm[0], -bounds[0], bounds[0])),
                  float(np.clip(q_arm[1], -bounds[1], bounds[1]))],
        "mode": 1 if mode else 0,
    }


def _teleop_env(model: ph.RobotModel, terrain_cfg: dict, seed: int) -> LocoEnv:
    kind = terrain_cfg.get("kind", "flat")
    cfg = EnvConfig(num_envs=1, seed=seed, episode_steps=10**9,
                    resample_steps=10**9, terrain_mix={kind: 1.0},
                    fixed_terrain=dict(terrain_cfg), auto_reset=False)
    env = LocoEnv(model, cfg)
    env.reset()
    return env


class TeleopSession:
    """Simulation state for serve(); also drives headless replay."""

    def __init__(self, checkpoint, terrain_cfg: dict, seed: int = 0,
                 timescale: float = 1.0):
        self.policy, _ = load_policy(checkpoint)
        self.model = ph.RobotModel()
        self.terrain_cfg = dict(terrain_cfg)
        self.seed = seed
        self.env = _teleop_env(self.model, terrain_cfg, seed)
        self.command = clamp_command_fields(self.model, 0.0, H_MAX, 0.0,
                                            list(self.model.arm_nominal), 0)
        self._apply_command()
        self.ticks = 0
        self.paused = False
        self.timescale = float(timescale)
        self.last_reward_terms: dict = {}
        self.gate_probs = [0.0] * self.policy.cfg.num_experts
        self._err_sums = {"v": 0.0, "h": 0.0, "pitch": 0.0, "arm": 0.0,
                          "stumble": 0.0}
        self.resets = 0

    @property
    def sim_time(self) -> float:
        return self.ticks * CONTROL_DT

    def _apply_command(self):
        cmd = self.command
        row = Command(v_x=np.array([cmd["v_x"]]),
                      h_base=np.array([cmd["h_base"]]),
                      torso_pitch=np.array([cmd["torso_pitch"]]),
                      q_arm_star=np.array([cmd["q_arm"]]),
                      mode=np.array([float(cmd["mode"])]))
        if cmd["mode"] == 0:
            row.q_arm_star[0] = self.model.arm_nominal
        self.env.command.set_row(0, row)

    def set_command(self, fields: dict):
        self.command = clamp_command_fields(
            self.model,
            fields.get("v_x", self.command["v_x"]),
            fields.get("h_base", self.command["h_base"]),
            fields.get("torso_pitch", self.command["torso_pitch"]),
            fields.get("q_arm", self.command["q_arm"]),
            fields.get("mode", self.command["mode"]))
        self._apply_command()

    def reset(self, terrain_cfg: dict | None = None):
        if terrain_cfg:
            self.terrain_cfg = dict(terrain_cfg)
        self.env = _teleop_env(self.model, self.terrain_cfg, self.seed)
        self._apply_command()
        for k in self._err_sums:
            self._err_sums[k] = 0.0
        self.resets += 1

    def tick(self) -> bool:
        """One policy step; returns True if the episode terminated."""
        obs = self.env.observation().flat.astype(np.float32)
        act = self.policy.act(obs, self.env.true_base_velocity.astype(np.float32),
                              None)
        _, reward, done, info = self.env.step(act["clipped"].astype(np.float64))
        self.ticks += 1
        self.gate_probs = [float(g) for g in act["gate_probs"][0]]
        self.last_reward_terms = {k: float(v[0]) for k, v in reward.terms.items()}
        st = self.env.state
        cmd = self.env.command
        self._err_sums["v"] += abs(float(st.base_vx[0] - cmd.v_x[0]))
        h = float(st.base_z[0] - info["terrain_h"][0])
        self._err_sums["h"] += abs(h - float(cmd.h_base[0]))
        torso = float(st.pitch[0] + st.q[0, 0])
        self._err_sums["pitch"] += abs(torso - float(cmd.torso_pitch[0]))
        self._err_sums["arm"] += float(np.abs(st.q[0, 5:]
                                              - cmd.q_arm_star[0]).mean())
        self._err_sums["stumble"] += float(info["contact"].stumble_events[0] > 0)
        if done[0]:
            self.env.reset_envs([0])
            self._apply_command()
            self.resets += 1
            return True
        return False

    def running_errors(self) -> dict:
        n = max(self.ticks, 1)
        return {k: v / n for k, v in self._err_sums.items()}

    def state_message(self) -> dict:
        st = self.env.state
        scan = self.env.observation().scan[0]
        contact = ph.contact_forces(self.model, st, self.env.terrains)
        return {
            "type": "state",
            "t": self.sim_time,
            "base": {"x": float(st.base_x[0]), "z": float(st.base_z[0]),
                     "theta": float(st.pitch[0])},
            "q": [float(v) for v in st.q[0]],
            "command": dict(self.command),
            "scan": [float(v) for v in scan],
            "foot_contacts": [bool(c) for c in contact.in_contact[0]],
            "reward_terms": self.last_reward_terms,
            "E_running": self.running_errors(),
            "gate_probs": self.gate_probs,
        }


async def _sim_loop(session: TeleopSession, mailbox: asyncio.Queue):
    next_wall = time.monotonic()
    while True:
        while not mailbox.empty():
            msg = mailbox.get_nowait()
            if msg["type"] == "command":
                session.set_command(msg)
            elif msg["type"] == "pause":
                session.paused = not session.paused
            elif msg["type"] == "reset":
                session.reset(msg.get("terrain"))
            elif msg["type"] == "timescale":
                session.timescale = max(0.01, float(msg.get("factor", 1.0)))
        if not session.paused:
            session.tick()
        next_wall += CONTROL_DT / session.timescale
        delay = next_wall - time.monotonic()
        if delay > 0:
            await asyncio.sleep(delay)
        else:
            next_wall = time.monotonic()  # fell behind; drop the deficit
            await asyncio.sleep(0)


async def _broadcaster(session: TeleopSession, clients: set):
    while True:
        if clients:
            payload = json.dumps(session.state_message())
            stale = []
            for ws in clients:
                try:
                    await ws.send(payload)
                except Exception:
                    stale.append(ws)
            for ws in stale:
                clients.discard(ws)
        await asyncio.sleep(1.0 / BROADCAST_HZ)


def _error(reason: str) -> str:
    return json.dumps({"type": "error", "reason": reason})


async def serve_async(checkpoint, terrain_cfg: dict, port: int,
                      host: str = "127.0.0.1", timescale: float = 1.0,
                      seed: int = 0, ready: asyncio.Event | None = None):
    import websockets

    session = TeleopSession(checkpoint, terrain_cfg, seed=seed,
                            timescale=timescale)
    mailbox: asyncio.Queue = asyncio.Queue()
    clients: set = set()
    authority: list = [None]  # first connected client commands; others observe

    async def handler(ws):
        clients.add(ws)
        if authority[0] is None:
            authority[0] = ws
        try:
            async for raw in ws:
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    await ws.send(_error("malformed JSON"))
                    continue
                if not isinstance(msg, dict) or "type" not in msg:
                    await ws.send(_error("missing type"))
                    continue
                if msg["type"] not in ("command", "pause", "reset", "timescale"):
                    await ws.send(_error(f"unknown type {msg['type']!r}"))
                    continue
                if ws is not authority[0]:
                    await ws.send(_error("observer"))
                    continue
                await mailbox.put(msg)
        finally:
            clients.discard(ws)
            if authority[0] is ws:
                authority[0] = None

    async with websockets.serve(handler, host, port):
        tasks = [asyncio.create_task(_sim_loop(session, mailbox)),
                 asyncio.create_task(_broadcaster(session, clients))]
        if ready is not None:
            ready.set()
        try:
            await asyncio.gather(*tasks)
        finally:
            for t in tasks:
                t.cancel()


def serve(checkpoint, terrain_cfg: dict, port: int, host: str = "127.0.0.1",
          timescale: float = 1.0, seed: int = 0):
    """Run the teleop service until interrupted."""
    asyncio.run(serve_async(checkpoint, terrain_cfg, port, host=host,
                            timescale=timescale, seed=seed))


# ---------------------------------------------------------------------------
# scripted replay

@dataclass
class ScriptRow:
    t_s: float
    v_x: float
    h_base: float
    torso_pitch: float
    q_arm0: float
    q_arm1: float
    mode: int


def load_script(path) -> list[ScriptRow]:
    rows: list[ScriptRow] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for lineno, raw in enumerate(reader, start=1):
            if not raw or raw[0].lstrip().startswith("#"):
                continue
            if [c.strip() for c in raw[:2]] == ["t_s", "v_x"]:
                continue  # header
            if len(raw) != 7:
                raise ScriptError(f"line {lineno}: expected 7 columns, "
                                  f"got {len(raw)}")
            try:
                vals = [float(c) for c in raw]
            except ValueError as exc:
                raise ScriptError(f"line {lineno}: {exc}") from None
            rows.append(ScriptRow(t_s=vals[0], v_x=vals[1], h_base=vals[2],
                                  torso_pitch=vals[3], q_arm0=vals[4],
                                  q_arm1=vals[5], mode=int(vals[6])))
    if any(b.t_s < a.t_s for a, b in zip(rows, rows[1:])):
        raise ScriptError("timestamps must be non-decreasing")
    return rows


@dataclass
class ReplayResult:
    report: MetricsReport
    success: bool
    duration_s: float
    resets: int


def replay(checkpoint, script_path, seed: int = 0,
           terrain_cfg: dict | None = None) -> ReplayResult:
    """Run a timestamped command script headlessly with mean actions.

    The script ends at the last row's timestamp; success means the episode
    survived (no fall/tilt termination) until then.
    """
    rows = load_script(script_path)
    session = TeleopSession(checkpoint, terrain_cfg or {"kind": "flat"},
                            seed=seed)
    if not rows:
        return ReplayResult(report=MetricsReport(
            e_v=0.0, e_h=0.0, e_pitch=0.0, e_arm=0.0, e_stumble=0.0,
            episodes=1, terrain=session.terrain_cfg.get("kind", "flat"),
            seeds=(seed,)), success=True, duration_s=0.0, resets=0)
    total_steps = int(round(rows[-1].t_s / CONTROL_DT))
    cursor = 0
    failed = False
    for step in range(total_steps):
        now = step * CONTROL_DT
        while cursor < len(rows) and rows[cursor].t_s <= now + 1e-9:
            r = rows[cursor]
            session.set_command({"v_x": r.v_x, "h_base": r.h_base,
                                 "torso_pitch": r.torso_pitch,
                                 "q_arm": [r.q_arm0, r.q_arm1],
                                 "mode": r.mode})
            cursor += 1
        if session.tick():
            failed = True
    errs = session.running_errors()
    report = MetricsReport(e_v=errs["v"], e_h=errs["h"], e_pitch=errs["pitch"],
                           e_arm=errs["arm"], e_stumble=errs["stumble"],
                           episodes=1,
                           terrain=session.terrain_cfg.get("kind", "flat"),
                           seeds=(seed,))
    return ReplayResult(report=report, success=not failed,
                        duration_s=total_steps * CONTROL_DT,
                        resets=session.resets)
