"""Small DiT-style latent generator trained with a rectified-flow objective and
sampled with Euler steps under classifier-free guidance."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .nn import MLP, Attention, Linear, Module, trunc_normal
from .optim import OptimizerConfig, Schedule, adamw_step, clip_grad_norm
from .rng import Stream
from .tensor import Parameter, Tensor


# ---------------------------------------------------------------------------
# latent normalization
# ---------------------------------------------------------------------------

@dataclass
class LatentStats:
    mean: np.ndarray  # (c,)
    std: np.ndarray  # (c,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, np.float64)
        self.std = np.asarray(self.std, np.float64)
        if (self.std <= 1e-12).any():
            bad = np.flatnonzero(self.std <= 1e-12).tolist()
            raise ValueError(f"latent channels {bad} have zero variance")

    @classmethod
    def fit(cls, latents: np.ndarray) -> "LatentStats":
        z = np.asarray(latents, np.float64)
        flat = z.reshape(-1, z.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def normalize(z: np.ndarray, stats: LatentStats) -> np.ndarray:
    return ((z - stats.mean) / stats.std).astype(np.asarray(z).dtype)


def denormalize(z: np.ndarray, stats: LatentStats) -> np.ndarray:
    return (z * stats.std + stats.mean).astype(np.asarray(z).dtype)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiTConfig:
    latent_size: int = 4
    channels: int = 16
    dim: int = 128
    depth: int = 6
    heads: int = 4
    num_classes: int = 10
    label_dropout: float = 0.1
    cfg_scale: float = 1.4
    freq_dim: int = 128

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def null_class(self) -> int:
        return self.num_classes


def timestep_features(t: np.ndarray, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``; shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _zeros(*shape) -> Parameter:
    return Parameter(np.zeros(shape, T.get_default_dtype()))


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


class DiTBlock(Module):
    def __init__(self, dim: int, heads: int, rng: Stream):
        self.attn = Attention(dim, heads, rng.split("attn"))
        self.mlp = MLP(dim, 4 * dim, rng.split("mlp"))
        self.ada = Linear(dim, 6 * dim, rng.split("ada"))
        self.ada.weight = _zeros(dim, 6 * dim)  # adaLN-Zero: block starts as identity
        self.dim = dim

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        d = self.dim
        mod = T.reshape(self.ada(T.silu(c)), (c.shape[0], 1, 6 * d))
        sh1, sc1, g1 = mod[..., :d], mod[..., d:2 * d], mod[..., 2 * d:3 * d]
        sh2, sc2, g2 = mod[..., 3 * d:4 * d], mod[..., 4 * d:5 * d], mod[..., 5 * d:]
        x = x + g1 * self.attn(_modulate(T.layer_norm(x, None, None, 1e-6), sh1, sc1))
        x = x + g2 * self.mlp(_modulate(T.layer_norm(x, None, None, 1e-6), sh2, sc2))
        return x


class DiT(Module):
    def __init__(self, config: DiTConfig, seed: int = 0):
        self.config = config
        rng = Stream(seed, ("dit",))
        c, d = config.channels, config.dim
        n = config.latent_size ** 2
        self.embed = Linear(c, d, rng.split("embed"), std=None)
        self.pos = Parameter(trunc_normal(rng.split("pos"), (n, d)), decay=False)
        self.t_mlp1 = Linear(config.freq_dim, d, rng.split("t1"))
        self.t_mlp2 = Linear(d, d, rng.split("t2"))
        self.labels = Parameter(trunc_normal(rng.split("labels"), (config.num_classes + 1, d)))
        self.blocks = [DiTBlock(d, config.heads, rng.split(f"b{i}")) for i in range(config.depth)]
        self.final_ada = Linear(d, 2 * d, rng.split("final_ada"))
        self.final_ada.weight = _zeros(d, 2 * d)
        self.out = Linear(d, c, rng.split("out"))
        self.out.weight = _zeros(d, c)

    def __call__(self, x: Tensor, t: np.ndarray, y: np.ndarray) -> Tensor:
        """Velocity for latents ``x`` (B, h, w, c) at times ``t`` (B,) with labels ``y`` (B,)."""
        cfg = self.config
        b, h, w, c = x.shape
        d = cfg.dim
        tok = self.embed(T.reshape(x, (b, h * w, c))) + self.pos
        tf = Tensor(timestep_features(t, cfg.freq_dim).astype(x.dtype))
        temb = self.t_mlp2(T.silu(self.t_mlp1(tf)))
        cond = temb + self.labels[np.asarray(y, np.int64)]
        for blk in self.blocks:
            tok = blk(tok, cond)
        mod = T.reshape(self.final_ada(T.silu(cond)), (b, 1, 2 * d))
        tok = _modulate(T.layer_norm(tok, None, None, 1e-6), mod[..., :d], mod[..., d:])
        return T.reshape(self.out(tok), (b, h, w, c))

    def save(self, path, extra: dict | None = None) -> Path:
        meta = {"kind": "dit", "dit": self.config.to_dict()}
        if extra:
            meta.update(extra)
        return checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "DiT":
        meta = checkpoint.load_config(path)
        net = cls(DiTConfig.from_dict(meta["dit"]))
        net.load_state_dict(checkpoint.load(path))
        return net


# ---------------------------------------------------------------------------
# rectified flow
# ---------------------------------------------------------------------------

def interpolate(x: np.ndarray, noise: np.ndarray, t: np.ndarray) -> np.ndarray:
    tt = np.asarray(t, x.dtype).reshape(-1, *([1] * (x.ndim - 1)))
    return (1.0 - tt) * x + tt * noise


def flow_loss(model, x: np.ndarray, labels: np.ndarray, rng: Stream,
              label_dropout: float = 0.1, null_class: int = 10,
              t: np.ndarray | None = None) -> Tensor:
    """MSE between predicted and straight-line velocity ``noise - x``.

    ``model(x_t, t, y)`` may be any callable returning a Tensor.
    """
    x = np.asarray(x)
    b = len(x)
    noise = rng.split("noise").standard_normal(x.shape).astype(x.dtype)
    if t is None:
        t = rng.split("t").uniform(0.0, 1.0, size=b)
    t = np.asarray(t, np.float64)
    y = np.asarray(labels, np.int64).copy()
    if label_dropout > 0:
        drop = rng.split("drop").random(b) < label_dropout
        y[drop] = null_class
    xt = interpolate(x, noise, t)
    target = (noise - x).astype(x.dtype)
    pred = model(Tensor(xt), t, y)
    return T.mean((pred - Tensor(target)) ** 2)


def guided_velocity(model, x: Tensor, t: np.ndarray, y: np.ndarray, cfg_scale: float,
                    null_class: int) -> np.ndarray:
    """v_uncond + s * (v_cond - v_uncond); s == 1 returns the conditional branch as is."""
    v_cond = model(x, t, y).data
    if cfg_scale == 1.0:
        return v_cond
    v_unc = model(x, t, np.full_like(y, null_class)).data
    return v_unc + cfg_scale * (v_cond - v_unc)


def sample(model, labels: np.ndarray, steps: int, cfg_scale: float, rng: Stream,
           shape: tuple[int, int, int], null_class: int = 10, dtype=np.float32
           ) -> np.ndarray:
    """Euler integration of dx/dt = v from t=1 (noise) to t=0; returns (B, h, w, c)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    y = np.asarray(labels, np.int64)
    x = rng.split("init").standard_normal((len(y),) + tuple(shape)).astype(dtype)
    dt = 1.0 / steps
    with T.no_grad():
        for i in range(steps):
            t = np.full(len(y), 1.0 - i * dt)
            v = guided_velocity(model, Tensor(x), t, y, cfg_scale, null_class)
            x = (x - dt * v).astype(dtype)
    return x


def sample_conditional(model, labels: np.ndarray, steps: int, rng: Stream,
                       shape: tuple[int, int, int], dtype=np.float32) -> np.ndarray:
    """Conditional-only Euler sampler (no guidance branch at all)."""
    y = np.asarray(labels, np.int64)
    x = rng.split("init").standard_normal((len(y),) + tuple(shape)).astype(dtype)
    dt = 1.0 / steps
    with T.no_grad():
        for i in range(steps):
            t = np.full(len(y), 1.0 - i * dt)
            x = (x - dt * model(Tensor(x), t, y).data).astype(dtype)
    return x


# ---------------------------------------------------------------------------
# training and sample dumps
# ---------------------------------------------------------------------------

@dataclass
class DiTTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 5e-4
    min_lr: float = 1e-5
    warmup_epochs: int = 1
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train_dit(latents: np.ndarray, labels: np.ndarray, config: DiTConfig,
              train: DiTTrainConfig, log=None) -> tuple[DiT, list[dict]]:
    """Fit a DiT to already-normalized latents (N, h, w, c)."""
    net = DiT(config, seed=train.seed)
    params = net.parameters()
    opt = OptimizerConfig(base_lr=train.base_lr, min_lr=train.min_lr,
                          weight_decay=train.weight_decay, warmup_epochs=train.warmup_epochs,
                          grad_clip=train.grad_clip)
    n = len(latents)
    spe = max(n // train.batch_size, 1)
    sched = Schedule(opt, spe, spe * train.epochs)
    rng = Stream(train.seed, ("dit_train",))
    history = []
    step = 0
    for ep in range(train.epochs):
        order = rng.split(f"order{ep}").permutation(n)
        tot = 0.0
        for i in range(spe):
            idx = order[i * train.batch_size:(i + 1) * train.batch_size]
            net.zero_grad()
            loss = flow_loss(net, latents[idx], labels[idx], rng.split(f"s{step}"),
                             config.label_dropout, config.null_class)
            T.backward(loss)
            if opt.grad_clip:
                clip_grad_norm(params, opt.grad_clip)
            adamw_step(params, opt, step, sched.lr(step))
            tot += loss.item()
            step += 1
        history.append({"epoch": ep + 1, "flow_loss": tot / spe})
        if log:
            log(f"dit epoch {ep + 1}/{train.epochs} flow loss {tot / spe:.4f}")
    return net, history


def dump_samples(path: str | os.PathLike, samples: np.ndarray, labels: np.ndarray,
                 seed: int, cfg_scale: float, steps: int, extra: dict | None = None) -> Path:
    """Write samples in the checkpoint format; the JSON sidecar is the index."""
    index = {"kind": "samples", "labels": [int(v) for v in labels], "seed": int(seed),
             "cfg_scale": float(cfg_scale), "steps": int(steps),
             "shape": list(samples.shape)}
    if extra:
        index.update(extra)
    return checkpoint.save(path, {"samples": np.asarray(samples, np.float32)}, index)


def load_samples(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    return checkpoint.load(path)["samples"], checkpoint.load_config(path)
