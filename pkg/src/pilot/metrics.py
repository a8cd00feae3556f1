"""Episodic tracking metrics, evaluation over terrain suites, and ablations.

Errors are per-step mean L1 deviations between achieved state and command,
averaged over episodes.  The stumble rate counts control steps containing
at least one substep stumble event on either foot.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import physics as ph
from .env import EnvConfig, LocoEnv
from .policy import Policy, load_policy


@dataclass
class MetricsReport:
    e_v: float
    e_h: float
    e_pitch: float
    e_arm: float
    e_stumble: float
    episodes: int
    terrain: str = "mixed"
    seeds: tuple = ()

    def __post_init__(self):
        for name in ("e_v", "e_h", "e_pitch", "e_arm", "e_stumble"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.e_stumble > 1.0:
            raise ValueError("e_stumble is a per-step frequency, at most 1")

    def as_row(self) -> dict:
        d = asdict(self)
        d["seeds"] = ",".join(str(s) for s in self.seeds)
        return d


def episodic_errors(trajectory: dict, commands: dict) -> MetricsReport:
    """Mean |achieved - target| per step for one episode.

    trajectory/commands are dicts of aligned arrays: v_x, height, torso_pitch,
    q_arm (T, 2) plus trajectory["stumble"] (T,) bool.
    """
    t = len(trajectory["v_x"])
    if t == 0:
        raise ValueError("empty trajectory")
    e_v = float(np.abs(np.asarray(trajectory["v_x"]) - commands["v_x"]).mean())
    e_h = float(np.abs(np.asarray(trajectory["height"]) - commands["height"]).mean())
    e_p = float(np.abs(np.asarray(trajectory["torso_pitch"])
                       - commands["torso_pitch"]).mean())
    e_a = float(np.abs(np.asarray(trajectory["q_arm"])
                       - commands["q_arm"]).mean())
    return MetricsReport(e_v=e_v, e_h=e_h, e_pitch=e_p, e_arm=e_a,
                         e_stumble=stumble_rate(trajectory["stumble"]),
                         episodes=1)


def stumble_rate(step_had_stumble) -> float:
    """Fraction of control steps with at least one stumble event."""
    arr = np.asarray(step_had_stumble, dtype=bool)
    if arr.size == 0:
        return 0.0
    return float(arr.mean())


def merge_reports(reports: list[MetricsReport], terrain: str = "mixed",
                  seeds=()) -> MetricsReport:
    total = sum(r.episodes for r in reports)
    agg = {name: float(sum(getattr(r, name) * r.episodes for r in reports) / total)
           for name in ("e_v", "e_h", "e_pitch", "e_arm", "e_stumble")}
    return MetricsReport(**agg, episodes=total, terrain=terrain, seeds=tuple(seeds))


def _episode_report(e: dict) -> MetricsReport:
    return MetricsReport(e_v=e["errors"]["v"], e_h=e["errors"]["h"],
                         e_pitch=e["errors"]["pitch"], e_arm=e["errors"]["arm"],
                         e_stumble=e["stumble_rate"], episodes=1,
                         terrain=e["terrain"])


def evaluate_policy(policy: Policy, env_cfg: EnvConfig, episodes: int,
                    seed: int, max_steps: int | None = None,
                    curriculum=None) -> MetricsReport:
    """Deterministic (mean-action) evaluation: one episode per env."""
    from dataclasses import asdict as dc_asdict
    cfg_kw = dc_asdict(env_cfg)
    cfg_kw.update(num_envs=episodes, seed=seed, auto_reset=False)
    env = LocoEnv(ph.RobotModel(), EnvConfig(**cfg_kw))
    if curriculum is not None:
        env.curriculum = curriculum
    env.reset()
    steps = max_steps or env.cfg.episode_steps
    active = np.ones(env.n, dtype=bool)
    collected: list = []
    for _ in range(steps):
        obs = env.observation().flat.astype(np.float32)
        act = policy.act(obs, env.true_base_velocity.astype(np.float32), None)
        _, _, done, info = env.step(act["clipped"].astype(np.float64))
        for e in info["episodes"]:
            if active[e["env"]]:
                collected.append(_episode_report(e))
                active[e["env"]] = False
        if done.any():
            env.reset_envs(np.flatnonzero(done))
        if not active.any():
            break
    # envs cut off by max_steps contribute their partial episode
    for i in np.flatnonzero(active):
        n_steps = max(int(env.steps[i]), 1)
        ep = env._episode
        collected.append(MetricsReport(
            e_v=float(ep["abs_v"][i] / n_steps),
            e_h=float(ep["abs_h"][i] / n_steps),
            e_pitch=float(ep["abs_pitch"][i] / n_steps),
            e_arm=float(ep["abs_arm"][i] / n_steps),
            e_stumble=float(ep["stumble_steps"][i] / n_steps),
            episodes=1, terrain=env.terrains.terrains[i].kind))
    kinds = sorted(env_cfg.terrain_mix)
    return merge_reports(collected, terrain="+".join(kinds), seeds=(seed,))


def run_eval(checkpoint: str, suite: dict[str, dict], episodes: int = 8,
             seeds=(0, 1, 2), out_dir: str | None = None,
             curriculum=None) -> list[dict]:
    """Evaluate a checkpoint over named terrain suites; returns table rows.

    suite: name -> EnvConfig keyword overrides (terrain_mix at minimum).
    """
    policy, meta = load_policy(checkpoint)
    rows = []
    all_reports = []
    for name, overrides in suite.items():
        reports = []
        for seed in seeds:
            cfg = EnvConfig(num_envs=episodes, seed=seed, **overrides)
            reports.append(evaluate_policy(policy, cfg, episodes, seed,
                                           curriculum=curriculum))
        merged = merge_reports(reports, terrain=name, seeds=seeds)
        rows.append({"suite": name, **merged.as_row()})
        all_reports.extend(reports)
    agg = merge_reports(all_reports, terrain="aggregate", seeds=seeds)
    rows.append({"suite": "aggregate", **agg.as_row()})
    if out_dir is not None:
        write_report(rows, Path(out_dir), f"eval_{Path(checkpoint).stem}_suite")
    return rows


def write_report(rows: list[dict], out_dir: Path, stem: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.json", "w") as f:
        json.dump(rows, f, indent=2)
    with open(out_dir / f"{stem}.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


ABLATION_VARIANTS = {
    "full": {},
    "scan_masked": {"mask_scan": True},
    "flat_encoder": {"flat_encoder": True},
    "monolithic": {"monolithic": True},
}


def run_ablation(train_fn, eval_suite: dict, seeds=(0, 1, 2, 3, 4),
                 variants=None, out_dir: str | None = None,
                 episodes: int = 8) -> list[dict]:
    """Train each variant with identical budgets/seeds, then evaluate.

    train_fn(variant_name, policy_overrides, seed) -> checkpoint path; the
    caller fixes the budget so every variant gets the same one.
    """
    variants = variants or ABLATION_VARIANTS
    rows = []
    for name, overrides in variants.items():
        per_seed = []
        for seed in seeds:
            ckpt = train_fn(name, overrides, seed)
            table = run_eval(ckpt, eval_suite, episodes=episodes, seeds=(seed,))
            agg = next(r for r in table if r["suite"] == "aggregate")
            per_seed.append(agg)
        med = {k: float(np.median([r[k] for r in per_seed]))
               for k in ("e_v", "e_h", "e_pitch", "e_arm", "e_stumble")}
        rows.append({"variant": name, "seeds": len(seeds), **med})
    if out_dir is not None:
        write_report(rows, Path(out_dir), "ablation")
    return rows
