"""Policy network stack: history encoder with velocity/future-latent heads,
attention-based terrain encoder, mixture-of-experts actor, and critic.

The future-latent pathway has an EMA "target" copy of the history trunk and
its latent head; the online head's output at step t is pulled toward the
target's output at step t+1 by a contrastive loss (see trainer).

Checkpoint files are self-describing: a magic string, format version, and a
hash of the embedded config, followed by named float blocks.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import netcore as nc

CKPT_MAGIC = b"PILOTCKPT"
CKPT_VERSION = 1

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class PolicyConfig:
    frame_width: int = 30
    history_frames: int = 6
    scan_width: int = 11
    act_dim: int = 7
    vel_dim: int = 2

    hist_hidden: tuple = (128, 128)
    z_h: int = 32
    z_next: int = 16

    phi1_hidden: tuple = (64,)
    global_out: int = 32
    psi_hidden: int = 16
    local_feat: int = 15        # pooled features; +1 raw scan value per slot
    phi2_hidden: tuple = (32,)
    attn_d_model: int = 32
    attn_out: int = 32
    heads: int = 4

    n_experts: int = 4
    expert_hidden: tuple = (128, 128)
    gate_hidden: tuple = (64, 64)
    critic_hidden: tuple = (128, 128)

    logstd_init: float = float(np.log(0.5))
    logstd_min: float = -4.0
    logstd_max: float = 1.0

    # ablation switches
    mask_scan: bool = False      # "w/o vision": the policy sees a zeroed scan
    flat_encoder: bool = False   # plain MLP over the raw scan replaces attention
    monolithic: bool = False     # single expert, constant gate

    @property
    def obs_width(self) -> int:
        return self.history_frames * self.frame_width + self.scan_width

    @property
    def z_p(self) -> int:
        return self.global_out + self.attn_out

    @property
    def z_o(self) -> int:
        return self.z_h + self.vel_dim + self.frame_width

    @property
    def num_experts(self) -> int:
        return 1 if self.monolithic else self.n_experts

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        kwargs = dict(d)
        for key in ("hist_hidden", "expert_hidden", "gate_hidden", "critic_hidden",
                    "phi1_hidden", "phi2_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def tiny(cls, **kw) -> "PolicyConfig":
        """Small widths for gradient checks; same topology."""
        base = dict(hist_hidden=(16, 16), z_h=8, z_next=4, phi1_hidden=(8,),
                    global_out=8, psi_hidden=6, local_feat=5, phi2_hidden=(8,),
                    attn_d_model=8, attn_out=8, heads=2, expert_hidden=(12, 12),
                    gate_hidden=(8, 8), critic_hidden=(12, 12))
        base.update(kw)
        return cls(**base)


@dataclass
class PolicyOutput:
    mean: nc.Tensor          # (B, act)
    log_std: nc.Tensor       # (act,)
    gate_probs: nc.Tensor    # (B, E)
    expert_means: nc.Tensor  # (B, E, act)
    value: nc.Tensor         # (B,)
    v_hat: nc.Tensor         # (B, 2)
    z_next_hat: nc.Tensor    # (B, z_next)
    z_h: nc.Tensor           # (B, z_h)


class ExpertBank:
    """All experts evaluated in one batched matmul per layer."""

    def __init__(self, store: nc.ParamStore, name: str, n_experts: int,
                 widths, out_gain: float = 0.01):
        self.n_experts = n_experts
        self.weights = []
        self.biases = []
        rng = store.rng
        for li, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            gain = out_gain if li == len(widths) - 2 else 1.0
            stack = np.stack([_orthogonal(rng, a, b, gain) for _ in range(n_experts)])
            self.weights.append(store.add(f"{name}.w{li}", stack))
            self.biases.append(store.add(f"{name}.b{li}", np.zeros((n_experts, 1, b))))

    def __call__(self, x: nc.Tensor) -> nc.Tensor:
        """x: (B, in) -> (B, E, out)."""
        h = nc.reshape(x, (1,) + x.shape)
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nc.add(nc.matmul(h, w), b)
            if li < len(self.weights) - 1:
                h = nc.elu(h)
        return nc.swapaxes(h, 0, 1)


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int,
                gain: float) -> np.ndarray:
    a = rng.standard_normal((n_in, n_out))
    q, r = np.linalg.qr(a if n_in >= n_out else a.T)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class Policy:
    def __init__(self, cfg: PolicyConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.store = nc.ParamStore(np.random.Generator(np.random.PCG64([seed, 7])),
                                   dtype=dtype)
        self._build(self.store)
        # target copy of the future-encoder pathway (history trunk + latent head)
        self.target_store = nc.ParamStore(np.random.default_rng(0), dtype=dtype)
        self.target_layers = self._build_future_encoder(self.target_store)
        self.sync_target()

    # -- construction -------------------------------------------------------

    def _build_future_encoder(self, store: nc.ParamStore):
        cfg = self.cfg
        trunk = nc.MLP(store, "hist", (cfg.obs_width,) + cfg.hist_hidden + (cfg.z_h,))
        next_head = nc.Dense(store, "next_head", cfg.z_h, cfg.z_next)
        return trunk, next_head

    def _build(self, store: nc.ParamStore):
        cfg = self.cfg
        self.hist_trunk, self.next_head = self._build_future_encoder(store)
        self.vel_head = nc.Dense(store, "vel_head", cfg.z_h, cfg.vel_dim)

        if cfg.flat_encoder:
            self.scan_mlp = nc.MLP(store, "scan_mlp",
                                   (cfg.scan_width, 64, cfg.z_p))
        else:
            self.phi1 = nc.MLP(store, "phi1",
                               (cfg.scan_width,) + cfg.phi1_hidden + (cfg.global_out,))
            self.psi = nc.MLP(store, "psi", (1, cfg.psi_hidden, cfg.local_feat))
            self.pos_bias = store.zeros("pos_bias", cfg.scan_width, cfg.local_feat + 1)
            self.phi2 = nc.MLP(store, "phi2",
                               (cfg.frame_width,) + cfg.phi2_hidden + (cfg.attn_d_model,))
            self.attn = nc.MultiHeadAttention(store, "attn", cfg.attn_d_model,
                                              cfg.local_feat + 1, cfg.attn_d_model,
                                              cfg.heads, cfg.attn_out)

        moe_in = cfg.z_p + cfg.z_o + 1
        self.experts = ExpertBank(store, "experts", cfg.num_experts,
                                  (moe_in,) + cfg.expert_hidden + (cfg.act_dim,))
        if not cfg.monolithic:
            self.gate = nc.MLP(store, "gate",
                               (moe_in,) + cfg.gate_hidden + (cfg.num_experts,))
        self.critic = nc.MLP(store, "critic",
                             (moe_in + cfg.vel_dim,) + cfg.critic_hidden + (1,))
        self.log_std = store.full("log_std", (cfg.act_dim,), cfg.logstd_init)

    def sync_target(self):
        self.target_store.load_state_dict(
            {k: v for k, v in self.store.state_dict().items()
             if k in self.target_store.params})

    def update_target(self, ema: float):
        """target <- ema * target + (1 - ema) * online."""
        if not 0.0 <= ema <= 1.0:
            raise ValueError("ema must lie in [0, 1]")
        online = self.store.params
        for name, t in self.target_store.params.items():
            t.data = ema * t.data + (1.0 - ema) * online[name].data

    # -- forward ------------------------------------------------------------

    def _split_obs(self, obs: nc.Tensor):
        cfg = self.cfg
        proprio_w = cfg.history_frames * cfg.frame_width
        o_n = nc.narrow(obs, -1, proprio_w - cfg.frame_width, cfg.frame_width)
        scan = nc.narrow(obs, -1, proprio_w, cfg.scan_width)
        return o_n, scan

    def _prepare_obs(self, obs) -> nc.Tensor:
        if isinstance(obs, nc.Tensor):
            t = obs
        else:
            t = nc.Tensor(np.asarray(obs, dtype=self.dtype))
        if t.data.shape[-1] != self.cfg.obs_width:
            raise ValueError(f"observation width {t.data.shape[-1]} != "
                             f"{self.cfg.obs_width}")
        if self.cfg.mask_scan:
            data = t.data.copy()
            data[..., self.cfg.history_frames * self.cfg.frame_width:] = 0.0
            t = nc.Tensor(data, requires_grad=t.requires_grad)
        return t

    def encode_history(self, obs) -> tuple[nc.Tensor, nc.Tensor, nc.Tensor]:
        """(z_H, v_hat, z_next_hat) from the stacked history + scan."""
        obs = self._prepare_obs(obs)
        z_h = self.hist_trunk(obs)
        return z_h, self.vel_head(z_h), self.next_head(z_h)

    def encode_perception(self, scan: nc.Tensor, o_n: nc.Tensor) -> nc.Tensor:
        """Global scan features fused with attention over per-slot local features."""
        cfg = self.cfg
        if cfg.flat_encoder:
            return self.scan_mlp(scan)
        global_feat = self.phi1(scan)
        slots = nc.reshape(scan, scan.shape[:-1] + (cfg.scan_width, 1))
        pooled = nc.avg_pool_grid(slots, 3)
        local = nc.concat([self.psi(pooled), slots], axis=-1)
        local = nc.add(local, self.pos_bias)
        attended = self.attn(self.phi2(o_n), local)
        return nc.concat([global_feat, attended], axis=-1)

    def target_future_embedding(self, obs: np.ndarray) -> np.ndarray:
        """Target-encoder latent for the contrastive objective (no gradients)."""
        trunk, head = self.target_layers
        if self.cfg.mask_scan:
            obs = np.array(obs, dtype=self.dtype, copy=True)
            obs[..., self.cfg.history_frames * self.cfg.frame_width:] = 0.0
        with nc.no_grad():
            return head(trunk(nc.Tensor(np.asarray(obs, dtype=self.dtype)))).data

    def forward(self, obs, true_vel=None, gate_override=None) -> PolicyOutput:
        cfg = self.cfg
        obs = self._prepare_obs(obs)
        o_n, scan = self._split_obs(obs)
        z_h, v_hat, z_next_hat = self.encode_history(obs)
        z_p = self.encode_perception(scan, o_n)
        z_o = nc.concat([z_h, v_hat, o_n], axis=-1)
        # frame layout: q(0:7) dq(7:14) rate(14) sin/cos(15:17) cmd(17:23) prev(23:30)
        i_t = nc.narrow(o_n, -1, 22, 1)  # mode indicator, last command entry
        s_in = nc.concat([z_p, z_o, i_t], axis=-1)

        expert_means = self.experts(s_in)          # (B, E, act)
        if gate_override is not None:
            probs = nc.as_tensor(np.asarray(gate_override, dtype=self.dtype))
        elif cfg.monolithic:
            probs = nc.constant(np.ones((obs.data.shape[0], 1), dtype=self.dtype))
        else:
            probs = nc.softmax(self.gate(s_in), axis=-1)
        weights = nc.reshape(probs, probs.shape + (1,))
        mean = nc.sum_(nc.mul(weights, expert_means), axis=1)

        if true_vel is None:
            critic_vel = nc.constant(np.zeros((obs.data.shape[0], cfg.vel_dim),
                                              dtype=self.dtype))
        else:
            critic_vel = nc.as_tensor(np.asarray(true_vel, dtype=self.dtype))
        value = nc.reshape(self.critic(nc.concat([s_in, critic_vel], axis=-1)),
                           (obs.data.shape[0],))
        log_std = nc.clip(self.log_std, cfg.logstd_min, cfg.logstd_max)
        return PolicyOutput(mean=mean, log_std=log_std, gate_probs=probs,
                            expert_means=expert_means, value=value, v_hat=v_hat,
                            z_next_hat=z_next_hat, z_h=z_h)

    # -- rollout helpers ------------------------------------------------------

    def act(self, obs: np.ndarray, true_vel: np.ndarray,
            noise: np.ndarray | None):
        """Numpy-only sampling path; returns raw/clipped actions and log-probs."""
        with nc.no_grad():
            out = self.forward(obs, true_vel)
        mean = out.mean.data
        log_std = out.log_std.data
        std = np.exp(log_std)
        if noise is None:
            raw = mean.copy()
        else:
            raw = mean + std * noise.astype(mean.dtype)
        logp = gaussian_log_prob(raw, mean, log_std)
        return {
            "raw": raw,
            "clipped": np.clip(raw, -1.0, 1.0),
            "logp": logp,
            "value": out.value.data.copy(),
            "mean": mean.copy(),
            "gate_probs": out.gate_probs.data.copy(),
            "v_hat": out.v_hat.data.copy(),
        }

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> dict:
        out = {f"online.{k}": v for k, v in self.store.state_dict().items()}
        out.update({f"target.{k}": v for k, v in self.target_store.state_dict().items()})
        return out

    def load_state_dict(self, blocks: dict):
        online = {k.split(".", 1)[1]: v for k, v in blocks.items()
                  if k.startswith("online.")}
        target = {k.split(".", 1)[1]: v for k, v in blocks.items()
                  if k.startswith("target.")}
        self.store.load_state_dict(online)
        self.target_store.load_state_dict(target)


def gaussian_log_prob(x: np.ndarray, mean: np.ndarray,
                      log_std: np.ndarray) -> np.ndarray:
    z = (x - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG2PI).sum(axis=-1)


# ---------------------------------------------------------------------------
# checkpoint container

def config_hash(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


class CheckpointError(RuntimeError):
    pass


def write_checkpoint(path, config: dict, blocks: dict, meta: dict | None = None):
    """Binary container: magic, version, config hash, JSON meta, named blocks."""
    payload = {"config": config, "meta": meta or {}}
    meta_bytes = json.dumps(payload, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(config_hash(config))
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}[arr.dtype]
        name_b = name.encode()
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path, expected_config: dict | None = None):
    """Returns (config, meta, blocks); refuses corrupt or mismatched files."""
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    if bytes(view[:9]) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic string; not a checkpoint")
    off = 9
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = bytes(view[off:off + 32])
    off += 32
    (meta_len,) = struct.unpack_from("<I", view, off)
    off += 4
    payload = json.loads(bytes(view[off:off + meta_len]))
    off += meta_len
    config = payload["config"]
    if config_hash(config) != stored_hash:
        raise CheckpointError(f"{path}: config hash mismatch (corrupt file)")
    if expected_config is not None and config_hash(expected_config) != stored_hash:
        raise CheckpointError(f"{path}: checkpoint config does not match the "
                              "requested configuration")
    (n_blocks,) = struct.unpack_from("<I", view, off)
    off += 4
    blocks = {}
    dtypes = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + name_len]).decode()
        off += name_len
        code, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        dtype = dtypes[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * dtype.itemsize
        blocks[name] = arr.astype(dtype.newbyteorder("="))
    return config, payload["meta"], blocks


def save_policy(path, policy: Policy, meta: dict | None = None):
    write_checkpoint(path, {"policy": policy.cfg.to_dict()},
                     policy.state_dict(), meta)


def load_policy(path, seed: int = 0) -> tuple[Policy, dict]:
    config, meta, blocks = read_checkpoint(path)
    policy = Policy(PolicyConfig.from_dict(config["policy"]), seed=seed)
    policy.load_state_dict(blocks)
    return policy, meta
