"""ViT building blocks: patch embedding, transformer blocks, positional
embeddings, token compression/expansion and the latent bottleneck."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Stream
from .tensor import Parameter, Tensor


class Module:
    """Parameter container. Children and Parameters are discovered from
    attributes (and lists of them) in definition order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = name
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{name}.{i}"
                        yield item.name, item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} "
                               f"unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def trunc_normal(rng: Stream, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    x = np.clip(x, -2.0, 2.0) * std
    return x.astype(T.get_default_dtype())


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: Stream, bias: bool = True,
                 std: float | None = 0.02):
        if std is None:  # fan-in scaled
            std = 1.0 / math.sqrt(din)
        self.weight = Parameter(trunc_normal(rng, (din, dout), std))
        self.bias = Parameter(np.zeros(dout, T.get_default_dtype()), decay=False) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        dt = T.get_default_dtype()
        self.weight = Parameter(np.ones(d, dt), decay=False)
        self.bias = Parameter(np.zeros(d, dt), decay=False)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: Stream, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter((rng.standard_normal((cout, cin, k, k)) * std)
                                .astype(T.get_default_dtype()))
        self.bias = Parameter(np.zeros(cout, T.get_default_dtype()), decay=False) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: Stream, dout: int | None = None):
        self.fc1 = Linear(d, hidden, rng.split("fc1"))
        self.fc2 = Linear(hidden, dout or d, rng.split("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: Stream):
        if d % heads:
            raise ValueError(f"heads={heads} must divide dim={d}")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng.split("qkv"))
        self.proj = Linear(d, d, rng.split("proj"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(T.self_attention(self.qkv(x), self.heads))


class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x)) with GELU, ratio 4."""

    def __init__(self, d: int, heads: int, rng: Stream, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng.split("attn"))
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng.split("mlp"))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def patchify_array(img: np.ndarray, p: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, N, 3*p*p); each patch flattened channel-major."""
    b, c, h, w = img.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide {h}x{w}")
    x = img.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(b, (h // p) * (w // p), c * p * p)


def patch_tokens(img: Tensor, p: int) -> Tensor:
    """Differentiable version of :func:`patchify_array`."""
    b, c, h, w = img.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide {h}x{w}")
    x = T.reshape(img, (b, c, h // p, p, w // p, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, (h // p) * (w // p), c * p * p))


def unpatchify(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    b, n, dd = tokens.shape
    c = dd // (p * p)
    if n != (h // p) * (w // p) or c * p * p != dd or h % p or w % p:
        raise ValueError(f"cannot place {n} tokens of dim {dd} on a {h}x{w} image "
                         f"with patch {p}")
    x = T.reshape(tokens, (b, h // p, w // p, c, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (b, c, h, w))


class PatchEmbed(Module):
    def __init__(self, p: int, d: int, rng: Stream, in_channels: int = 3):
        self.p = p
        self.proj = Linear(in_channels * p * p, d, rng, std=None)

    def num_tokens(self, h: int, w: int) -> int:
        if h % self.p or w % self.p:
            raise ValueError(f"patch size {self.p} does not divide {h}x{w}")
        return (h // self.p) * (w // self.p)

    def __call__(self, img: Tensor) -> Tensor:
        return self.proj(patch_tokens(img, self.p))


def patchify(image: Tensor, embed: PatchEmbed) -> Tensor:
    return embed(image)


# ---------------------------------------------------------------------------
# positional embeddings
# ---------------------------------------------------------------------------

def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """1-D half-pixel bilinear interpolation weights, shape (dst, src)."""
    m = np.zeros((dst, src))
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        x = min(max(x, 0.0), src - 1.0)
        x0 = int(math.floor(x))
        x1 = min(x0 + 1, src - 1)
        f = x - x0
        m[i, x0] += 1.0 - f
        m[i, x1] += f
    return m


class PositionalEmbedding(Module):
    """Learned (grid^2 [+1]) x d table; grid part resampled bilinearly for other grids."""

    def __init__(self, grid: int, d: int, rng: Stream, cls_slot: bool = True):
        self.grid = grid
        self.cls_slot = cls_slot
        self.table = Parameter(trunc_normal(rng, (grid * grid + int(cls_slot), d)),
                               decay=False)
        self._cache: dict[int, np.ndarray] = {}

    def _resample(self, g: int) -> np.ndarray:
        if g not in self._cache:
            m = bilinear_matrix(self.grid, g)
            self._cache[g] = np.kron(m, m).astype(self.table.dtype)
        return self._cache[g]

    def grid_part(self, g: int) -> Tensor:
        tab = self.table[int(self.cls_slot):] if self.cls_slot else self.table
        if g == self.grid:
            return tab
        return T.matmul(Tensor(self._resample(g)), tab)

    def cls_part(self) -> Tensor:
        return self.table[0:1]


# ---------------------------------------------------------------------------
# compression
# ---------------------------------------------------------------------------

def _grid_side(n: int) -> int:
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    return g


class TokenCompressor(Module):
    """Reduce a g x g token grid to (g/2) x (g/2) at constant width d."""

    KINDS = ("conv", "pixel_shuffle_mlp")

    def __init__(self, d: int, rng: Stream, kind: str = "conv"):
        if kind not in self.KINDS:
            raise ValueError(f"unknown compressor kind {kind!r}")
        self.kind = kind
        if kind == "conv":
            self.conv1 = Conv2d(d, d, 3, rng.split("conv1"), stride=1, padding=1)
            self.conv2 = Conv2d(d, d, 3, rng.split("conv2"), stride=2, padding=1)
        else:
            self.merge = Linear(4 * d, d, rng.split("merge"), std=None)

    def __call__(self, tokens: Tensor) -> Tensor:
        b, n, d = tokens.shape
        g = _grid_side(n)
        if g % 2:
            raise ValueError(f"token grid side {g} is odd; cannot compress 2x")
        if self.kind == "conv":
            x = T.transpose(T.reshape(tokens, (b, g, g, d)), (0, 3, 1, 2))
            x = self.conv2(T.gelu(self.conv1(x)))
            return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, (g // 2) ** 2, d))
        x = T.pixel_unshuffle_grid(T.reshape(tokens, (b, g, g, d)), 2)
        return T.reshape(self.merge(x), (b, (g // 2) ** 2, d))


def compress_tokens(tokens: Tensor, compressor: TokenCompressor) -> Tensor:
    return compressor(tokens)


class TokenExpander(Module):
    """Decoder mirror of the compressor: d -> 4d then 2x2 pixel-shuffle scatter."""

    def __init__(self, d: int, rng: Stream):
        self.fc = Linear(d, 4 * d, rng, std=None)

    def __call__(self, tokens: Tensor) -> Tensor:
        b, n, d = tokens.shape
        g = _grid_side(n)
        x = T.reshape(self.fc(tokens), (b, g, g, 4 * d))
        return T.reshape(T.pixel_shuffle_grid(x, 2), (b, 4 * n, d))


def expand_tokens(tokens: Tensor, expander: TokenExpander) -> Tensor:
    return expander(tokens)


class LatentBottleneck(Module):
    """Token grid g x g -> latent (g/r) x (g/r) x c via pixel-unshuffle + projection."""

    def __init__(self, d: int, r: int, c: int, rng: Stream):
        self.r = r
        self.proj = Linear(r * r * d, c, rng, std=None)

    def __call__(self, tokens: Tensor) -> Tensor:
        b, n, d = tokens.shape
        g = _grid_side(n)
        if g % self.r:
            raise ValueError(f"grouping {self.r} does not divide grid side {g}")
        x = T.reshape(tokens, (b, g, g, d))
        if self.r > 1:
            x = T.pixel_unshuffle_grid(x, self.r)
        return self.proj(x)


class LatentUnbottleneck(Module):
    """Decoder entry: latent (h, w, c) -> token grid (h*r)^2 x d."""

    def __init__(self, c: int, r: int, d: int, rng: Stream):
        self.r = r
        self.d = d
        self.proj = Linear(c, r * r * d, rng, std=None)

    def __call__(self, z: Tensor) -> Tensor:
        b, h, w, _ = z.shape
        x = self.proj(z)
        if self.r > 1:
            x = T.pixel_shuffle_grid(x, self.r)
        return T.reshape(x, (b, h * w * self.r * self.r, self.d))
