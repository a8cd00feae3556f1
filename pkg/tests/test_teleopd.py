import asyncio
import json
import threading
import time

import numpy as np
import pytest

# server-thread teardown cancels tasks mid-await; the stray exceptions are benign
pytestmark = pytest.mark.filterwarnings(
    "ignore::pytest.PytestUnhandledThreadExceptionWarning")

from pilot import teleopd as td
from pilot.policy import Policy, PolicyConfig, save_policy


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("tele") / "tiny.ckpt"
    save_policy(path, Policy(PolicyConfig.tiny(), seed=0))
    return path


def test_clamp_command_fields():
    import pilot.physics as ph
    m = ph.RobotModel()
    out = td.clamp_command_fields(m, v_x=5.0, h_base=0.1, torso_pitch=-2.0,
                                  q_arm=[9.0, -9.0], mode=True)
    assert out["v_x"] == 1.0
    assert out["h_base"] == 0.3
    assert out["torso_pitch"] == -0.3
    assert out["q_arm"] == [2.0, -2.0]
    assert out["mode"] == 1


def test_session_tick_accounting(ckpt):
    session = td.TeleopSession(ckpt, {"kind": "flat"})
    for _ in range(500):
        session.tick()
    assert session.ticks == 500
    assert session.sim_time == pytest.approx(10.0)


def test_session_state_message_fields(ckpt):
    session = td.TeleopSession(ckpt, {"kind": "flat"})
    session.tick()
    msg = session.state_message()
    assert msg["type"] == "state"
    assert set(msg) == {"type", "t", "base", "q", "command", "scan",
                        "foot_contacts", "reward_terms", "E_running",
                        "gate_probs"}
    assert set(msg["base"]) == {"x", "z", "theta"}
    assert len(msg["q"]) == 7 and len(msg["scan"]) == 11
    assert len(msg["foot_contacts"]) == 2
    assert set(msg["E_running"]) == {"v", "h", "pitch", "arm", "stumble"}
    json.dumps(msg)  # must be serializable
    assert all(np.isfinite(v) for v in msg["q"] + msg["scan"])


def test_session_command_applies_next_tick(ckpt):
    session = td.TeleopSession(ckpt, {"kind": "flat"})
    session.set_command({"v_x": 0.5})
    assert session.env.command.v_x[0] == 0.5
    session.tick()
    # the freshest frame in the observation carries the new command
    frame = session.env.observation().frames[0, -1]
    assert frame[17] == pytest.approx(0.5)


def test_session_survives_reset_command(ckpt):
    session = td.TeleopSession(ckpt, {"kind": "flat"})
    session.set_command({"v_x": 0.4})
    session.reset({"kind": "rough", "difficulty": 0.3, "seed": 5})
    assert session.terrain_cfg["kind"] == "rough"
    assert session.env.command.v_x[0] == 0.4  # command survives terrain reset


class ServerThread:
    def __init__(self, ckpt, port):
        self.ready = threading.Event()
        self.loop = None
        self.thread = threading.Thread(target=self._run, args=(ckpt, port),
                                       daemon=True)
        self.thread.start()

    def _run(self, ckpt, port):
        self.loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self.loop)
        ready = asyncio.Event()

        async def main():
            task = asyncio.create_task(td.serve_async(
                ckpt, {"kind": "flat"}, port, timescale=50.0, ready=ready))
            await ready.wait()
            self.ready.set()
            await task

        try:
            self.loop.run_until_complete(main())
        except asyncio.CancelledError:
            pass

    def stop(self):
        if self.loop is not None:
            self.loop.call_soon_threadsafe(
                lambda: [t.cancel() for t in asyncio.all_tasks(self.loop)])
        self.thread.join(timeout=5)


@pytest.fixture()
def server(ckpt):
    port = 8931
    srv = ServerThread(ckpt, port)
    assert srv.ready.wait(timeout=10)
    yield f"ws://127.0.0.1:{port}"
    srv.stop()


def _recv_state(ws, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        msg = json.loads(ws.recv(timeout=timeout))
        if msg.get("type") == "state":
            return msg
    raise TimeoutError("no state message")


def test_serve_default_command_and_echo(server):
    from websockets.sync.client import connect
    with connect(server) as ws:
        state = _recv_state(ws)
        assert state["command"]["v_x"] == 0.0
        assert state["command"]["h_base"] == pytest.approx(0.76)
        ws.send(json.dumps({"type": "command", "v_x": 0.5, "h_base": 0.7,
                            "torso_pitch": 0.0, "q_arm": [0.3, 0.6],
                            "mode": 0}))
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            state = _recv_state(ws)
            if state["command"]["v_x"] == 0.5:
                break
        assert state["command"]["v_x"] == 0.5


def test_serve_clamps_out_of_range(server):
    from websockets.sync.client import connect
    with connect(server) as ws:
        _recv_state(ws)
        ws.send(json.dumps({"type": "command", "v_x": 7.0, "h_base": 0.0,
                            "torso_pitch": 9.0, "q_arm": [10, -10], "mode": 1}))
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            state = _recv_state(ws)
            if state["command"]["v_x"] == 1.0:
                break
        cmd = state["command"]
        assert cmd["v_x"] == 1.0 and cmd["h_base"] == 0.3
        assert cmd["torso_pitch"] == 1.5
        assert cmd["q_arm"] == [2.0, -2.0]


def test_serve_second_client_is_observer(server):
    from websockets.sync.client import connect
    with connect(server) as first, connect(server) as second:
        _recv_state(first)
        second.send(json.dumps({"type": "command", "v_x": 0.1}))
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            msg = json.loads(second.recv(timeout=5))
            if msg.get("type") == "error":
                assert msg["reason"] == "observer"
                break
        else:
            pytest.fail("observer never got an error reply")


def test_serve_malformed_json_keeps_connection(server):
    from websockets.sync.client import connect
    with connect(server) as ws:
        ws.send("this is not json {")
        deadline = time.monotonic() + 5
        got_error = False
        while time.monotonic() < deadline:
            msg = json.loads(ws.recv(timeout=5))
            if msg.get("type") == "error":
                got_error = True
                break
        assert got_error
        # still connected and receiving states
        assert _recv_state(ws)["type"] == "state"


def test_serve_unknown_type_rejected(server):
    from websockets.sync.client import connect
    with connect(server) as ws:
        ws.send(json.dumps({"type": "dance"}))
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            msg = json.loads(ws.recv(timeout=5))
            if msg.get("type") == "error":
                assert "unknown type" in msg["reason"]
                return
        pytest.fail("no error for unknown type")


# -- replay ---------------------------------------------------------------------

def test_load_script_parses_and_validates(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("# comment\nt_s, v_x, h_base, torso_pitch, q_arm0, q_arm1, mode\n"
                    "0.0, 0.1, 0.7, 0.0, 0.3, 0.6, 0\n"
                    "1.0, 0.2, 0.7, 0.0, 0.3, 0.6, 1\n")
    rows = td.load_script(path)
    assert len(rows) == 2
    assert rows[1].mode == 1


def test_load_script_error_carries_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0.0, 0.1, 0.7, 0.0, 0.3, 0.6, 0\n0.5, nope, 0.7, 0, 0, 0, 0\n")
    with pytest.raises(td.ScriptError, match="line 2"):
        td.load_script(path)
    path.write_text("0.0, 0.1, 0.7, 0\n")
    with pytest.raises(td.ScriptError, match="line 1"):
        td.load_script(path)


def test_replay_empty_script_succeeds(ckpt, tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    result = td.replay(ckpt, path)
    assert result.success
    assert result.duration_s == 0.0


def test_replay_time_varying_target(ckpt, tmp_path):
    path = tmp_path / "squat.csv"
    path.write_text("0.0, 0.0, 0.40, 0.0, 0.3, 0.6, 0\n"
                    "3.0, 0.0, 0.76, 0.0, 0.3, 0.6, 0\n")
    result = td.replay(ckpt, path, seed=1)
    assert result.duration_s == pytest.approx(3.0)
    assert result.report.e_h >= 0.0


def test_replay_deterministic(ckpt, tmp_path):
    path = tmp_path / "walk.csv"
    path.write_text("0.0, 0.3, 0.7, 0.0, 0.3, 0.6, 0\n2.0, 0.0, 0.7, 0.0, 0.3, 0.6, 0\n")
    a = td.replay(ckpt, path, seed=3)
    b = td.replay(ckpt, path, seed=3)
    assert a == b
