"""Record a wire-protocol fixture stream for the console tests.

Runs a short headless teleop session, logging every broadcast-rate state
message together with the server-side foot positions (the console's forward
kinematics must reproduce them within 1e-3 m).
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from pilot import physics as ph
from pilot.policy import Policy, PolicyConfig, save_policy
from pilot.teleopd import TeleopSession

OUT = Path(__file__).resolve().parent.parent / "frontend" / "fixtures" / "wire_fixture.json"


def main():
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "fixture.ckpt"
        save_policy(ckpt, Policy(PolicyConfig.tiny(), seed=4))
        session = TeleopSession(ckpt, {"kind": "stairs_up", "difficulty": 0.4,
                                       "seed": 2})
        rng = np.random.default_rng(0)
        frames = []
        for i in range(300):
            if i % 50 == 0:
                session.set_command({
                    "v_x": float(rng.uniform(-1, 1)),
                    "h_base": float(rng.uniform(0.3, 0.76)),
                    "torso_pitch": float(rng.uniform(-0.3, 1.5)),
                    "q_arm": [float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2))],
                    "mode": int(rng.uniform() < 0.5),
                })
            session.tick()
            if i % 2 == 0:  # ~record at broadcast rate (sim ticks at 50 Hz)
                msg = session.state_message()
                feet = ph.foot_positions(session.model, session.env.state.coords)[0]
                frames.append({
                    "message": msg,
                    "expected_feet": {
                        "left": {"x": float(feet[0, 0]), "z": float(feet[0, 1])},
                        "right": {"x": float(feet[1, 0]), "z": float(feet[1, 1])},
                    },
                })
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps({"frames": frames}, indent=1))
    print(f"wrote {len(frames)} frames to {OUT}")


if __name__ == "__main__":
    main()
