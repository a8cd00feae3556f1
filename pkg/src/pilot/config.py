"""Config file handling and named run presets.

Config files are YAML with a flat dotted-key namespace, e.g.::

    env.num_envs: 256
    model.friction: 0.9
    terrain.mix.rough: 0.6
    train.iterations: 2000

Presets provide the baseline; explicit files and --set overrides win.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .env import EnvConfig
from .physics import RobotModel
from .policy import PolicyConfig
from .trainer import TrainConfig

PRESETS: dict[str, dict] = {
    # stand on flat ground and track base-height commands (diagnostic)
    "stand_track": {
        "env.num_envs": 64,
        "env.v_max": 0.0,
        "terrain.mix.flat": 1.0,
        "curriculum.stage_lock": "height",
        "curriculum.init_alpha": {"alpha_height": 1.0},
        "policy.logstd_init": -1.2039728043259361,  # sigma0 = 0.30
        "train.entropy_coef": 0.001,
        "train.iterations": 300,
        "train.checkpoint_every": 100,
    },
    # velocity tracking over flat + rough, curriculum up to torso orientation
    "locomotion": {
        "env.num_envs": 256,
        "terrain.mix.flat": 0.4,
        "terrain.mix.rough": 0.6,
        "curriculum.stage_cap": "orientation",
        "train.iterations": 2000,
        "train.checkpoint_every": 100,
    },
    # stair-heavy mixture used for the ablation comparison
    "stairs": {
        "env.num_envs": 128,
        "terrain.mix.stairs_up": 0.35,
        "terrain.mix.stairs_down": 0.25,
        "terrain.mix.rough": 0.25,
        "terrain.mix.platform": 0.15,
        "curriculum.stage_cap": "height",
        "train.iterations": 800,
        "train.checkpoint_every": 100,
    },
    # everything enabled, through the manipulation stage
    "full": {
        "env.num_envs": 256,
        "terrain.mix.flat": 0.2,
        "terrain.mix.rough": 0.3,
        "terrain.mix.stairs_up": 0.2,
        "terrain.mix.stairs_down": 0.1,
        "terrain.mix.slope": 0.1,
        "terrain.mix.platform": 0.1,
        "train.iterations": 4000,
        "train.checkpoint_every": 200,
    },
}

EVAL_SUITES: dict[str, dict[str, dict]] = {
    "flat": {"flat": {"terrain_mix": {"flat": 1.0}}},
    "stairs": {
        "stairs_up": {"terrain_mix": {"stairs_up": 1.0}},
        "stairs_down": {"terrain_mix": {"stairs_down": 1.0}},
    },
    "full": {
        "flat": {"terrain_mix": {"flat": 1.0}},
        "rough": {"terrain_mix": {"rough": 1.0}},
        "slope": {"terrain_mix": {"slope": 1.0}},
        "stairs_up": {"terrain_mix": {"stairs_up": 1.0}},
        "stairs_down": {"terrain_mix": {"stairs_down": 1.0}},
        "platform": {"terrain_mix": {"platform": 1.0}},
    },
}


def load_config_file(path) -> dict:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping of dotted keys")
    return data


def parse_override(text: str) -> tuple[str, object]:
    """'key=value' with YAML-typed values (numbers, bools, lists)."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML leaves dotless scientific notation like 5e-4 as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return key.strip(), value


def merge(preset: str | None = None, config_path=None, overrides=()) -> dict:
    cfg: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; "
                             f"available: {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    if config_path is not None:
        cfg.update(load_config_file(config_path))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        cfg[key] = value
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    out = {}
    for key, value in cfg.items():
        if key.startswith(prefix + "."):
            sub = key[len(prefix) + 1:]
            if "." not in sub:
                out[sub] = value
    return out


def build_model(cfg: dict) -> RobotModel:
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in _section(cfg, "model").items()}
    return RobotModel(**kwargs)


def build_env_config(cfg: dict, seed: int | None = None) -> EnvConfig:
    kwargs = _section(cfg, "env")
    mix = {k.split(".")[-1]: float(v) for k, v in cfg.items()
           if k.startswith("terrain.mix.")}
    if mix:
        kwargs["terrain_mix"] = mix
    curk = _section(cfg, "curriculum")
    for src, dst in (("gate", "gate"), ("increment", "increment"),
                     ("stage_lock", "stage_lock"), ("stage_cap", "stage_cap"),
                     ("init_alpha", "init_alpha")):
        if src in curk and curk[src] is not None:
            kwargs[dst] = curk[src]
    if seed is not None:
        kwargs["seed"] = seed
    return EnvConfig(**kwargs)


def build_train_config(cfg: dict, seed: int | None = None,
                       out_dir: str | None = None) -> TrainConfig:
    kwargs = _section(cfg, "train")
    if seed is not None:
        kwargs["seed"] = seed
    if out_dir is not None:
        kwargs["out_dir"] = out_dir
    return TrainConfig(**kwargs)


def build_policy_config(cfg: dict) -> PolicyConfig:
    kwargs = _section(cfg, "policy")
    for key in ("hist_hidden", "expert_hidden", "gate_hidden", "critic_hidden",
                "phi1_hidden", "phi2_hidden"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return PolicyConfig(**kwargs)


def parse_terrain_spec(spec: str) -> dict:
    """'kind[:difficulty[:seed]]' or a YAML file path with terrain keys."""
    path = Path(spec)
    if path.suffix in (".yml", ".yaml") and path.exists():
        return load_config_file(path)
    parts = spec.split(":")
    out: dict = {"kind": parts[0]}
    if len(parts) > 1:
        out["difficulty"] = float(parts[1])
    if len(parts) > 2:
        out["seed"] = int(parts[2])
    return out
