"""Staged token-compression autoencoder and its vanilla single-bottleneck baseline."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import checkpoint
from . import tensor as T
from .nn import (LatentBottleneck, LatentUnbottleneck, LayerNorm, Linear, Module,
                 PatchEmbed, PositionalEmbedding, TokenCompressor, TokenExpander,
                 TransformerBlock, trunc_normal, unpatchify)
from .rng import Stream
from .tensor import Parameter, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TCAEConfig:
    image_size: int = 32
    patch_size: int = 2
    embed_dim: int = 64
    heads: int = 4
    depth_stage1: int = 3  # M
    depth_stage2: int = 3  # N
    staged: bool = True
    latent_channels: int = 16
    latent_size: int = 4
    compressor: str = "conv"
    cls_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch {self.patch_size} does not divide image "
                              f"{self.image_size}")
        if self.embed_dim % self.heads:
            raise ConfigError("heads must divide embed_dim")
        if self.depth_stage1 < 0 or self.depth_stage2 < 0:
            raise ConfigError("stage depths must be nonnegative")
        if self.compressor not in TokenCompressor.KINDS:
            raise ConfigError(f"unknown compressor {self.compressor!r}")
        g = self.grid
        if self.staged:
            if g % 2:
                raise ConfigError(f"staged compression needs an even token grid, got {g}")
            if (g // 2) % self.latent_size:
                raise ConfigError(f"compressed grid {g // 2} not divisible by latent "
                                  f"side {self.latent_size}")
        elif g % self.latent_size:
            raise ConfigError(f"token grid {g} not divisible by latent side "
                              f"{self.latent_size}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def bottleneck_grid(self) -> int:
        return self.grid // 2 if self.staged else self.grid

    @property
    def group(self) -> int:
        """Pixel-unshuffle factor r of the final bottleneck."""
        return self.bottleneck_grid // self.latent_size

    @property
    def depth(self) -> int:
        return self.depth_stage1 + self.depth_stage2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TCAEConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown TCAEConfig fields: {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw) -> "TCAEConfig":
        d = self.to_dict()
        d.update(kw)
        return TCAEConfig(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class CompressionRatios(NamedTuple):
    pix_to_tok: int
    tok_to_lat: int
    pix_to_lat: int
    per_side: float
    bottleneck: int  # tokens entering the final bottleneck / (h*w)
    intermediate: int  # token-count reduction inside the encoder (4 when staged)


def compression_ratios(config: TCAEConfig) -> CompressionRatios:
    """Area ratios of the pixel -> token -> latent path.

    ``tok_to_lat`` is measured from the patch-embedding token count, so
    ``pix_to_tok * tok_to_lat == pix_to_lat`` for every config. With staged
    compression that ratio splits into ``intermediate * bottleneck``.
    """
    hw = config.latent_size ** 2
    pix_to_tok = config.patch_size ** 2
    tok_to_lat, rem = divmod(config.num_tokens, hw)
    if rem:
        raise ConfigError("token count not a multiple of latent area")
    pix_to_lat = config.image_size ** 2 // hw
    intermediate = 4 if config.staged else 1
    bottleneck = config.bottleneck_grid ** 2 // hw
    return CompressionRatios(pix_to_tok, tok_to_lat, pix_to_lat, math.sqrt(pix_to_lat),
                             bottleneck, intermediate)


@dataclass
class LatentBatch:
    values: Tensor  # (B, h, w, c)
    fingerprint: str

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class TokenTrace:
    tokens: Tensor  # final pre-bottleneck tokens (B, S, d), normalized
    cls: Tensor | None  # (B, d)
    grid: int


class FingerprintError(ValueError):
    pass


class Encoder(Module):
    def __init__(self, cfg: TCAEConfig, rng: Stream):
        d = cfg.embed_dim
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, d, rng.split("patch"))
        self.pos = PositionalEmbedding(cfg.grid, d, rng.split("pos"), cls_slot=cfg.cls_token)
        self.cls_token = Parameter(trunc_normal(rng.split("cls"), (1, 1, d)), decay=False) \
            if cfg.cls_token else None
        self.mask_token = Parameter(trunc_normal(rng.split("mask"), (1, 1, d)), decay=False)
        if cfg.staged:
            self.blocks1 = [TransformerBlock(d, cfg.heads, rng.split(f"b1.{i}"))
                            for i in range(cfg.depth_stage1)]
            self.compressor = TokenCompressor(d, rng.split("compress"), cfg.compressor)
            self.blocks2 = [TransformerBlock(d, cfg.heads, rng.split(f"b2.{i}"))
                            for i in range(cfg.depth_stage2)]
        else:
            self.blocks1 = [TransformerBlock(d, cfg.heads, rng.split(f"b1.{i}"))
                            for i in range(cfg.depth)]
            self.compressor = None
            self.blocks2 = []
        self.norm = LayerNorm(d)
        self.bottleneck = LatentBottleneck(d, cfg.group, cfg.latent_channels,
                                           rng.split("bottleneck"))

    def tokens(self, img: Tensor, mask: np.ndarray | None = None) -> TokenTrace:
        """Run everything up to (not including) the latent bottleneck.

        ``mask`` is a (B, N) boolean array over the input patch grid; masked
        patch embeddings are replaced by the learned mask token.
        """
        b, _, h, w = img.shape
        p = self.cfg.patch_size
        if h != w or h % p:
            raise ValueError(f"image {h}x{w} incompatible with patch {p}")
        g = h // p
        x = self.patch_embed(img)
        if mask is not None:
            m = np.asarray(mask, dtype=x.dtype).reshape(b, g * g, 1)
            x = x * Tensor(1.0 - m) + self.mask_token * Tensor(m)
        x = x + self.pos.grid_part(g)
        has_cls = self.cls_token is not None
        if has_cls:
            c = T.broadcast_to(self.cls_token + self.pos.cls_part(), (b, 1, x.shape[2]))
            x = T.concat([c, x], axis=1)
        for blk in self.blocks1:
            x = blk(x)
        if self.compressor is not None:
            if has_cls:
                c, x = x[:, :1], x[:, 1:]
            x = self.compressor(x)
            g //= 2
            if has_cls:
                x = T.concat([c, x], axis=1)
        for blk in self.blocks2:
            x = blk(x)
        x = self.norm(x)
        if has_cls:
            return TokenTrace(x[:, 1:], T.reshape(x[:, :1], (b, x.shape[2])), g)
        return TokenTrace(x, None, g)

    def to_latent(self, trace: TokenTrace) -> Tensor:
        z = self.bottleneck(trace.tokens)
        return z


class Decoder(Module):
    def __init__(self, cfg: TCAEConfig, rng: Stream):
        d = cfg.embed_dim
        self.cfg = cfg
        self.unbottleneck = LatentUnbottleneck(cfg.latent_channels, cfg.group, d,
                                               rng.split("unbottleneck"))
        self.pos_in = PositionalEmbedding(cfg.bottleneck_grid, d, rng.split("pos_in"),
                                          cls_slot=False)
        if cfg.staged:
            self.blocks2 = [TransformerBlock(d, cfg.heads, rng.split(f"b2.{i}"))
                            for i in range(cfg.depth_stage2)]
            self.expander = TokenExpander(d, rng.split("expand"))
            self.pos_mid = PositionalEmbedding(cfg.grid, d, rng.split("pos_mid"),
                                               cls_slot=False)
            self.blocks1 = [TransformerBlock(d, cfg.heads, rng.split(f"b1.{i}"))
                            for i in range(cfg.depth_stage1)]
        else:
            self.blocks2 = [TransformerBlock(d, cfg.heads, rng.split(f"b.{i}"))
                            for i in range(cfg.depth)]
            self.expander = None
            self.pos_mid = None
            self.blocks1 = []
        self.norm = LayerNorm(d)
        self.head = Linear(d, 3 * cfg.patch_size ** 2, rng.split("head"))

    def __call__(self, z: Tensor) -> Tensor:
        cfg = self.cfg
        x = self.unbottleneck(z)
        x = x + self.pos_in.grid_part(cfg.bottleneck_grid)
        for blk in self.blocks2:
            x = blk(x)
        if self.expander is not None:
            x = self.expander(x) + self.pos_mid.grid_part(cfg.grid)
            for blk in self.blocks1:
                x = blk(x)
        x = self.head(self.norm(x))
        return unpatchify(x, cfg.patch_size, cfg.image_size, cfg.image_size)


class TCAEModel(Module):
    def __init__(self, config: TCAEConfig, seed: int = 0):
        self.config = config
        rng = Stream(seed, ("tcae",))
        self.encoder = Encoder(config, rng.split("encoder"))
        self.decoder = Decoder(config, rng.split("decoder"))

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def encode(self, image: Tensor, mask: np.ndarray | None = None
               ) -> tuple[LatentBatch, TokenTrace]:
        s = self.config.image_size
        if image.ndim != 4 or image.shape[1:] != (3, s, s):
            raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {image.shape}")
        trace = self.encoder.tokens(image, mask)
        return LatentBatch(self.encoder.to_latent(trace), self.fingerprint), trace

    def decode(self, latent: LatentBatch | Tensor) -> Tensor:
        if isinstance(latent, LatentBatch):
            if latent.fingerprint != self.fingerprint:
                raise FingerprintError(f"latent fingerprint {latent.fingerprint} does not "
                                       f"match model {self.fingerprint}")
            latent = latent.values
        return self.decoder(latent)

    def reconstruct(self, image: Tensor) -> Tensor:
        z, _ = self.encode(image)
        return self.decode(z)

    # -- persistence ---------------------------------------------------
    def save(self, path, extra: dict | None = None) -> Path:
        cfg = {"model": self.config.to_dict(), "fingerprint": self.fingerprint}
        if extra:
            cfg.update(extra)
        return checkpoint.save(path, self.state_dict(), cfg)

    @classmethod
    def load(cls, path) -> "TCAEModel":
        meta = checkpoint.load_config(path)
        model = cls(TCAEConfig.from_dict(meta["model"]))
        model.load_state_dict(checkpoint.load(path))
        return model


def encode(image: Tensor, model: TCAEModel) -> tuple[LatentBatch, TokenTrace]:
    return model.encode(image)


def decode(latent: LatentBatch, model: TCAEModel) -> Tensor:
    return model.decode(latent)
