"""PPO with GAE, auxiliary velocity/contrastive losses, adaptive curriculum,
checkpointing and JSONL/CSV telemetry.

Rollout collection, advantage estimation and the clipped-surrogate update
run on the vectorized environment; every random stream (per-env dynamics,
per-env action noise, minibatch shuffling) is owned explicitly so that a
resumed run replays bit-identically.
"""

from __future__ import annotations

import csv
import json
import time
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import netcore as nc
from . import physics as ph
from .env import (EnvConfig, LocoEnv, REWARD_WEIGHTS, curriculum_update)
from .policy import (Policy, PolicyConfig, read_checkpoint, write_checkpoint)

LOG2PIE = float(np.log(2.0 * np.pi * np.e))


class TrainAbort(RuntimeError):
    """Training stopped on a non-recoverable numerical failure."""


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    horizon: int = 24
    lr: float = 3e-4
    lr_linear_decay: bool = True
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    vel_coef: float = 1.0
    contrastive_coef: float = 0.2
    contrastive_temp: float = 0.1
    gate_entropy_coef: float = 0.0
    contrastive_rows: int = 256   # cap on in-batch InfoNCE rows per minibatch
    max_grad_norm: float = 1.0
    target_ema: float = 0.995
    iterations: int = 1000
    seed: int = 0
    checkpoint_every: int = 50
    max_hours: float | None = None
    out_dir: str = "runs/default"

    def config_dict(self) -> dict:
        # bookkeeping fields do not define the run's numerical identity
        skip = {"out_dir", "checkpoint_every", "max_hours"}
        return {f"train.{k}": v for k, v in asdict(self).items() if k not in skip}


class ReturnNormalizer:
    """Running mean/std of returns; the critic is trained in normalized space.

    Raw returns span hundreds (termination carries -200, good episodes several
    thousand), which would otherwise drown the policy gradient in value-loss
    gradient after global norm clipping.
    """

    def __init__(self):
        self.count = 0.0
        self.mean = 0.0
        self.m2 = 0.0

    @property
    def std(self) -> float:
        if self.count < 2:
            return 1.0
        return max(float(np.sqrt(self.m2 / self.count)), 1e-2)

    def update(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        n = values.size
        if n == 0:
            return
        batch_mean = float(values.mean())
        batch_m2 = float(((values - batch_mean) ** 2).sum())
        delta = batch_mean - self.mean
        total = self.count + n
        self.mean += delta * n / total
        self.m2 += batch_m2 + delta**2 * self.count * n / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, v: np.ndarray) -> np.ndarray:
        return v * self.std + self.mean

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    def load_state_dict(self, state: dict):
        self.count = float(state["count"])
        self.mean = float(state["mean"])
        self.m2 = float(state["m2"])


class Adam:
    """First-order adaptive-moment optimizer over a ParamStore."""

    def __init__(self, store: nc.ParamStore, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.params.items()}

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.store.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": self.t}
        out["m"] = {k: v.copy() for k, v in self.m.items()}
        out["v"] = {k: v.copy() for k, v in self.v.items()}
        return out

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k]).copy()
            self.v[k] = np.asarray(state["v"][k]).copy()


def clip_gradients(store: nc.ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in store.params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in store.params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class RolloutBatch:
    obs: np.ndarray          # (T, N, W) float32
    next_obs: np.ndarray     # (T, N, W) float32, pre-reset at episode ends
    actions: np.ndarray      # (T, N, A) float32, pre-clip samples
    logp: np.ndarray         # (T, N)
    rewards: np.ndarray      # (T, N) float64
    values: np.ndarray       # (T, N)
    dones: np.ndarray        # (T, N) bool
    timeouts: np.ndarray     # (T, N) bool
    true_vel: np.ndarray     # (T, N, 2)
    next_true_vel: np.ndarray
    reward_terms: dict       # name -> summed term means
    episodes: list
    gate_mean: np.ndarray    # (E,)
    fault_steps: int

    @property
    def size(self) -> int:
        return self.obs.shape[0] * self.obs.shape[1]


def collect_rollouts(policy: Policy, env: LocoEnv, horizon: int,
                     noise_rngs: list) -> RolloutBatch:
    """Step all envs `horizon` times with sampled actions; done envs reset."""
    n = env.n
    width = env.observation().flat.shape[1]
    act_dim = policy.cfg.act_dim
    obs = np.empty((horizon, n, width), dtype=np.float32)
    next_obs = np.empty_like(obs)
    actions = np.empty((horizon, n, act_dim), dtype=np.float32)
    logps = np.empty((horizon, n), dtype=np.float32)
    rewards = np.empty((horizon, n), dtype=np.float64)
    values = np.empty((horizon, n), dtype=np.float32)
    dones = np.empty((horizon, n), dtype=bool)
    timeouts = np.empty((horizon, n), dtype=bool)
    true_vel = np.empty((horizon, n, 2), dtype=np.float32)
    next_true_vel = np.empty((horizon, n, 2), dtype=np.float32)
    term_sums: dict[str, float] = {k: 0.0 for k in REWARD_WEIGHTS}
    episodes: list = []
    gate_mean = np.zeros(policy.cfg.num_experts)
    fault_steps = 0

    for t in range(horizon):
        ob = env.observation().flat.astype(np.float32)
        vel = env.true_base_velocity.astype(np.float32)
        noise = np.stack([r.standard_normal(act_dim) for r in noise_rngs])
        act = policy.act(ob, vel, noise)
        nxt, reward, done, info = env.step(act["clipped"].astype(np.float64))

        obs[t] = ob
        actions[t] = act["raw"]
        logps[t] = act["logp"]
        values[t] = act["value"]
        true_vel[t] = vel
        rewards[t] = reward.total
        dones[t] = done
        timeouts[t] = info["timeout"]
        next_obs[t] = nxt.flat.astype(np.float32)
        next_true_vel[t] = info["true_vel"].astype(np.float32)
        if done.any():
            idx = np.flatnonzero(done)
            next_obs[t, idx] = info["final_obs"].astype(np.float32)
            next_true_vel[t, idx] = info["final_vel"].astype(np.float32)
        for k, v in reward.terms.items():
            term_sums[k] += float(v.mean())
        episodes.extend(info["episodes"])
        gate_mean += act["gate_probs"].mean(axis=0)
        fault_steps += int(info["fault"].sum())

    for k in term_sums:
        term_sums[k] /= horizon
    return RolloutBatch(obs=obs, next_obs=next_obs, actions=actions, logp=logps,
                        rewards=rewards, values=values, dones=dones,
                        timeouts=timeouts, true_vel=true_vel,
                        next_true_vel=next_true_vel, reward_terms=term_sums,
                        episodes=episodes, gate_mean=gate_mean / horizon,
                        fault_steps=fault_steps)


def compute_gae(rewards, values, next_values, dones, timeouts,
                gamma: float, lam: float):
    """delta_t = r + gamma * V(s') * live - V; A_t = delta + gamma lam (1-done) A_{t+1}.

    Timeouts bootstrap V(s') like a live transition but still cut the
    accumulation (the episode did end).  Returns (normalized advantages,
    returns, raw advantages).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    horizon = rewards.shape[0]
    live = (~dones) | timeouts
    adv = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1], dtype=np.float64)
    for t in range(horizon - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] * live[t] - values[t]
        acc = delta + gamma * lam * (~dones[t]) * acc
        adv[t] = acc
    returns = adv + values
    mean = adv.mean()
    std = adv.std()
    norm = (adv - mean) / (std + 1e-8)
    return norm, returns, adv


def _entropy(log_std: np.ndarray) -> float:
    return float(log_std.sum() + 0.5 * log_std.size * LOG2PIE)


def ppo_update(policy: Policy, optimizer: Adam, batch: RolloutBatch,
               cfg: TrainConfig, shuffle_rng: np.random.Generator,
               lr: float, next_values: np.ndarray,
               ret_norm: ReturnNormalizer | None = None) -> dict:
    """Clipped-surrogate update plus value, velocity and contrastive losses.

    Critic outputs live in return-normalized space; GAE runs on raw returns.
    """
    size = batch.size
    width = batch.obs.shape[-1]
    act_dim = batch.actions.shape[-1]
    obs = batch.obs.reshape(size, width)
    next_obs = batch.next_obs.reshape(size, width)
    acts = batch.actions.reshape(size, act_dim)
    logp_old = batch.logp.reshape(size)
    vel = batch.true_vel.reshape(size, 2)
    if ret_norm is None:
        ret_norm = ReturnNormalizer()
    values_raw = ret_norm.denormalize(batch.values)
    next_values_raw = ret_norm.denormalize(next_values)
    adv, returns, _ = compute_gae(batch.rewards, values_raw, next_values_raw,
                                  batch.dones, batch.timeouts, cfg.gamma, cfg.lam)
    ret_norm.update(returns)
    adv = adv.reshape(size).astype(np.float32)
    returns = ret_norm.normalize(returns).reshape(size).astype(np.float32)
    terminal = (batch.dones & ~batch.timeouts).reshape(size)

    # target embeddings are fixed during the update (EMA applied afterwards)
    target_emb = policy.target_future_embedding(next_obs)
    t_norm = target_emb / (np.linalg.norm(target_emb, axis=1, keepdims=True) + 1e-8)

    stats = {k: 0.0 for k in ("loss", "policy_loss", "value_loss", "entropy",
                              "vel_loss", "contrastive_loss", "approx_kl",
                              "clip_frac", "grad_norm")}
    count = 0
    mb_size = size // cfg.minibatches
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(size)
        for mb in range(cfg.minibatches):
            idx = perm[mb * mb_size:(mb + 1) * mb_size]
            out = policy.forward(obs[idx], true_vel=vel[idx])
            act_c = nc.constant(acts[idx])
            inv_std = nc.exp(nc.mul(out.log_std, -1.0))
            z = nc.mul(nc.sub(act_c, out.mean), inv_std)
            logp_new = nc.sub(nc.mul(nc.sum_(nc.square(z), axis=-1), -0.5),
                              nc.add(nc.sum_(out.log_std),
                                     0.5 * act_dim * float(np.log(2 * np.pi))))
            ratio = nc.exp(nc.sub(logp_new, nc.constant(logp_old[idx])))
            adv_c = nc.constant(adv[idx])
            surr = nc.minimum(nc.mul(ratio, adv_c),
                              nc.mul(nc.clip(ratio, 1.0 - cfg.clip_eps,
                                             1.0 + cfg.clip_eps), adv_c))
            policy_loss = nc.mul(nc.mean(surr), -1.0)

            value_loss = nc.mean(nc.square(nc.sub(out.value,
                                                  nc.constant(returns[idx]))))
            vel_loss = nc.mean(nc.sum_(nc.square(nc.sub(out.v_hat,
                                                        nc.constant(vel[idx]))),
                                       axis=-1))
            # entropy of the diagonal Gaussian: constant + sum(log_std)
            entropy_proxy = nc.sum_(out.log_std)

            loss = nc.add(policy_loss, nc.mul(value_loss, cfg.value_coef))
            loss = nc.sub(loss, nc.mul(entropy_proxy, cfg.entropy_coef))
            loss = nc.add(loss, nc.mul(vel_loss, cfg.vel_coef))

            keep = np.flatnonzero(~terminal[idx])
            if keep.size > cfg.contrastive_rows:
                keep = keep[:cfg.contrastive_rows]
            con_val = 0.0
            if cfg.contrastive_coef > 0.0 and keep.size >= 2:
                z_hat = nc.gather_rows(out.z_next_hat, keep)
                norm = nc.sqrt(nc.add(nc.sum_(nc.square(z_hat), axis=-1,
                                              keepdims=True), 1e-8))
                z_n = nc.div(z_hat, norm)
                logits = nc.mul(nc.matmul(z_n, nc.constant(
                    t_norm[idx][keep].T.astype(np.float32))),
                    1.0 / cfg.contrastive_temp)
                eye = nc.constant(np.eye(keep.size, dtype=np.float32))
                con = nc.mul(nc.sum_(nc.mul(nc.log_softmax(logits, axis=-1), eye)),
                             -1.0 / keep.size)
                loss = nc.add(loss, nc.mul(con, cfg.contrastive_coef))
                con_val = float(con.data)

            if cfg.gate_entropy_coef > 0.0 and not policy.cfg.monolithic:
                gate_ent = nc.mul(nc.sum_(nc.mul(out.gate_probs,
                                                 nc.log(nc.add(out.gate_probs,
                                                               1e-8)))),
                                  1.0 / len(idx))
                loss = nc.add(loss, nc.mul(gate_ent, cfg.gate_entropy_coef))

            if not np.isfinite(loss.data):
                dump = Path(cfg.out_dir) / "diagnostic_minibatch.npz"
                dump.parent.mkdir(parents=True, exist_ok=True)
                np.savez(dump, obs=obs[idx], actions=acts[idx],
                         adv=adv[idx], returns=returns[idx],
                         logp_old=logp_old[idx])
                raise TrainAbort(f"non-finite loss; minibatch dumped to {dump}")

            policy.store.zero_grads()
            loss.backward()
            grad_norm = clip_gradients(policy.store, cfg.max_grad_norm)
            optimizer.step(lr)

            with np.errstate(over="ignore"):
                ratio_np = ratio.data
            stats["loss"] += float(loss.data)
            stats["policy_loss"] += float(policy_loss.data)
            stats["value_loss"] += float(value_loss.data)
            stats["entropy"] += _entropy(out.log_std.data)
            stats["vel_loss"] += float(vel_loss.data)
            stats["contrastive_loss"] += con_val
            stats["approx_kl"] += float(np.mean(logp_old[idx] - logp_new.data))
            stats["clip_frac"] += float(np.mean(np.abs(ratio_np - 1.0) > cfg.clip_eps))
            stats["grad_norm"] += grad_norm
            count += 1

    policy.update_target(cfg.target_ema)
    return {k: v / max(count, 1) for k, v in stats.items()}


def bootstrap_values(policy: Policy, batch: RolloutBatch) -> np.ndarray:
    """V(s') per step: reuse in-rollout values, recompute only at boundaries."""
    horizon, n = batch.rewards.shape
    next_values = np.zeros((horizon, n), dtype=np.float32)
    next_values[:-1] = batch.values[1:]
    special = [(t, i) for t in range(horizon - 1) for i in np.flatnonzero(batch.dones[t])]
    special.extend((horizon - 1, i) for i in range(n))
    if special:
        rows = np.array([batch.next_obs[t, i] for t, i in special])
        vels = np.array([batch.next_true_vel[t, i] for t, i in special])
        with nc.no_grad():
            vals = policy.forward(rows, true_vel=vels).value.data
        for (t, i), v in zip(special, vals):
            next_values[t, i] = v
    return next_values


class Trainer:
    def __init__(self, model: ph.RobotModel, env_cfg: EnvConfig,
                 policy_cfg: PolicyConfig, train_cfg: TrainConfig):
        env_cfg.auto_reset = True
        self.model = model
        self.env_cfg = env_cfg
        self.train_cfg = train_cfg
        self.env = LocoEnv(model, env_cfg)
        self.policy = Policy(policy_cfg, seed=train_cfg.seed)
        self.optimizer = Adam(self.policy.store)
        self.noise_rngs = [np.random.Generator(np.random.PCG64([train_cfg.seed, i, 1]))
                           for i in range(env_cfg.num_envs)]
        self.shuffle_rng = np.random.Generator(np.random.PCG64([train_cfg.seed, 2]))
        self.ret_norm = ReturnNormalizer()
        self.iteration = 0
        self.window: deque = deque(maxlen=64)
        self.out_dir = Path(train_cfg.out_dir)
        self._csv_fields = None

    # -- config/identity ------------------------------------------------------

    def full_config(self) -> dict:
        cfg = {"policy": self.policy.cfg.to_dict()}
        cfg.update(self.model.config_dict())
        cfg.update(self.env_cfg.config_dict())
        cfg.update(self.train_cfg.config_dict())
        return cfg

    # -- metrics ---------------------------------------------------------------

    def _metrics_row(self, batch: RolloutBatch, stats: dict, lr: float,
                     wall: float) -> dict:
        eps = batch.episodes
        row = {
            "iteration": self.iteration,
            "mean_return": float(np.mean([e["return"] for e in eps])) if eps else None,
            "episodes": len(eps),
            "mean_step_reward": float(batch.rewards.mean()),
            "stage": self.env.curriculum.stage,
            "alpha_height": self.env.curriculum.alpha_height,
            "alpha_arm": self.env.curriculum.alpha_arm,
            "alpha_torso": self.env.curriculum.alpha_torso,
            "alpha_terrain": self.env.curriculum.alpha_terrain,
            "lr": lr,
            "wall_clock_s": wall,
            "fault_steps": batch.fault_steps,
        }
        for k, v in batch.reward_terms.items():
            row[f"reward.{k}"] = v
        for j, g in enumerate(batch.gate_mean):
            row[f"gate.{j}"] = float(g)
        for key in ("v", "h", "pitch", "arm"):
            row[f"E_{key}"] = float(np.mean([e["errors"][key] for e in eps])) \
                if eps else None
        row["E_stumble"] = float(np.mean([e["stumble_rate"] for e in eps])) \
            if eps else None
        row.update({f"loss.{k}": v for k, v in stats.items()})
        return row

    def _write_metrics(self, row: dict):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "metrics.jsonl", "a") as f:
            f.write(json.dumps(row) + "\n")
        csv_path = self.out_dir / "metrics.csv"
        new = not csv_path.exists()
        if self._csv_fields is None:
            self._csv_fields = list(row.keys())
        with open(csv_path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self._csv_fields,
                                    extrasaction="ignore")
            if new:
                writer.writeheader()
            writer.writerow(row)

    # -- checkpointing -----------------------------------------------------------

    def save_checkpoint(self, path):
        blocks = {}
        blocks.update({f"policy.{k}": v for k, v in self.policy.state_dict().items()})
        opt = self.optimizer.state_dict()
        blocks.update({f"adam.m.{k}": v for k, v in opt["m"].items()})
        blocks.update({f"adam.v.{k}": v for k, v in opt["v"].items()})
        env_state = self.env.get_state()
        blocks.update({f"env.{k}": np.asarray(v, dtype=np.float64)
                       for k, v in env_state["arrays"].items()})
        meta = {
            "iteration": self.iteration,
            "adam_t": opt["t"],
            "terrains": env_state["terrains"],
            "env_rng_states": env_state["rng_states"],
            "curriculum": env_state["curriculum"],
            "noise_rng_states": [r.bit_generator.state for r in self.noise_rngs],
            "shuffle_rng_state": self.shuffle_rng.bit_generator.state,
            "window": [[n, sums] for n, sums in self.window],
            "ret_norm": self.ret_norm.state_dict(),
        }
        write_checkpoint(path, self.full_config(), blocks, meta)

    def load_checkpoint(self, path):
        config, meta, blocks = read_checkpoint(path, expected_config=self.full_config())
        self.policy.load_state_dict(
            {k.split(".", 1)[1]: v for k, v in blocks.items()
             if k.startswith("policy.")})
        self.optimizer.load_state_dict({
            "t": meta["adam_t"],
            "m": {k[len("adam.m."):]: v for k, v in blocks.items()
                  if k.startswith("adam.m.")},
            "v": {k[len("adam.v."):]: v for k, v in blocks.items()
                  if k.startswith("adam.v.")},
        })
        arrays = {k[len("env."):]: v for k, v in blocks.items()
                  if k.startswith("env.")}
        arrays["done"] = arrays["done"].astype(bool)
        arrays["was_contact"] = arrays["was_contact"].astype(bool)
        arrays["steps"] = arrays["steps"].astype(np.int64)
        self.env.set_state({"arrays": arrays, "terrains": meta["terrains"],
                            "rng_states": meta["env_rng_states"],
                            "curriculum": meta["curriculum"]})
        for r, st in zip(self.noise_rngs, meta["noise_rng_states"]):
            r.bit_generator.state = st
        self.shuffle_rng.bit_generator.state = meta["shuffle_rng_state"]
        self.window = deque([(n, sums) for n, sums in meta["window"]], maxlen=64)
        self.ret_norm.load_state_dict(meta["ret_norm"])
        self.iteration = int(meta["iteration"])

    # -- main loop -----------------------------------------------------------------

    def lr_at(self, iteration: int) -> float:
        cfg = self.train_cfg
        if not cfg.lr_linear_decay:
            return cfg.lr
        frac = 1.0 - iteration / max(cfg.iterations, 1)
        return cfg.lr * max(frac, 0.02)

    def run_iteration(self) -> dict:
        t0 = time.monotonic()
        batch = collect_rollouts(self.policy, self.env, self.train_cfg.horizon,
                                 self.noise_rngs)
        if batch.fault_steps > 0.01 * batch.size:
            raise TrainAbort(f"{batch.fault_steps} simulation faults in one "
                             f"iteration ({batch.size} steps)")
        next_values = bootstrap_values(self.policy, batch)
        lr = self.lr_at(self.iteration)
        stats = ppo_update(self.policy, self.optimizer, batch, self.train_cfg,
                           self.shuffle_rng, lr, next_values, self.ret_norm)

        if batch.episodes:
            sums: dict[str, float] = {}
            for e in batch.episodes:
                for k, v in e["kernels"].items():
                    sums[k] = sums.get(k, 0.0) + v
            self.window.append((len(batch.episodes), sums))
        old_stage = self.env.curriculum.stage
        self.env.curriculum = curriculum_update(
            self.env.curriculum, list(self.window), gate=self.env_cfg.gate,
            increment=self.env_cfg.increment,
            locked=self.env_cfg.stage_lock is not None,
            stage_cap=self.env_cfg.stage_cap)
        if self.env.curriculum.stage != old_stage:
            self.window.clear()

        self.iteration += 1
        row = self._metrics_row(batch, stats, lr, time.monotonic() - t0)
        return row

    def train(self, on_iteration=None, max_new_iterations: int | None = None) -> list:
        cfg = self.train_cfg
        start = time.monotonic()
        stop_at = cfg.iterations if max_new_iterations is None \
            else min(cfg.iterations, self.iteration + max_new_iterations)
        if self.iteration == 0:
            self.env.reset()
        rows = []
        while self.iteration < stop_at:
            row = self.run_iteration()
            rows.append(row)
            self._write_metrics(row)
            if on_iteration is not None:
                on_iteration(self, row)
            if self.iteration % cfg.checkpoint_every == 0 \
                    or self.iteration == cfg.iterations:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                self.save_checkpoint(self.out_dir / f"ckpt_{self.iteration:06d}.pt")
            if cfg.max_hours is not None \
                    and time.monotonic() - start > cfg.max_hours * 3600:
                self.save_checkpoint(self.out_dir / f"ckpt_{self.iteration:06d}.pt")
                break
        return rows
