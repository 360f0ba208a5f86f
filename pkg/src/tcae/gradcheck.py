"""Central finite-difference checks for every differentiable op and layer.

Each case builds a function of some leaf tensors at a given shape; the check
contracts the output with a fixed random tensor R, backpropagates
sum(out * R), and compares the leaf gradients with central differences of the
same scalar. Everything runs in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .rng import Stream
from .tensor import Parameter, Tensor

EPS = 1e-4
TOL = 1e-5


@dataclass
class GradCase:
    name: str
    make: Callable  # (rng, shape) -> (fn, leaves)
    shapes: list
    kinks: bool = False  # piecewise-linear: skip coordinates that straddle a kink


@dataclass
class GradResult:
    name: str
    shape: tuple
    rel_err: float
    checked: int
    passed: bool


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(np.asarray(a, np.float64), requires_grad=True)


def _away_from_zero(rng: Stream, shape, margin: float = 0.1) -> np.ndarray:
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _coords(size: int, rng: Stream, limit: int) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:limit])


def check_gradients(fn: Callable[[], Tensor], leaves: list[Tensor], rng: Stream,
                    eps: float = EPS, max_coords: int = 48,
                    skip_kinks: bool = False) -> tuple[float, int]:
    """Return (relative error, number of coordinates compared).

    With ``skip_kinks`` a coordinate whose forward and backward one-sided
    differences disagree by more than 1% is left out: the step crossed a
    non-differentiable point, so neither side is a valid reference.
    """
    with T.default_dtype(np.float64):
        out = fn()
        f0 = float((out.data * rng.split("R").standard_normal(out.shape)).sum())
        r = rng.split("R").standard_normal(out.shape)
        for lf in leaves:
            if isinstance(lf, Parameter):
                lf.zero_grad()
            else:
                lf.grad = None
        T.backward(T.tsum(out * Tensor(r)))
        num_all, ana_all = [], []
        for i, lf in enumerate(leaves):
            g = lf.grad if lf.grad is not None else np.zeros_like(lf.data)
            flat = lf.data.reshape(-1)
            for j in _coords(flat.size, rng.split(f"c{i}"), max_coords):
                old = flat[j]
                flat[j] = old + eps
                with T.no_grad():
                    fp = float((fn().data * r).sum())
                flat[j] = old - eps
                with T.no_grad():
                    fm = float((fn().data * r).sum())
                flat[j] = old
                if skip_kinks:
                    up, down = fp - f0, f0 - fm
                    if abs(up - down) > 0.01 * max(abs(up), abs(down), 1e-12):
                        continue
                num_all.append((fp - fm) / (2 * eps))
                ana_all.append(g.reshape(-1)[j])
        num = np.array(num_all)
        ana = np.array(ana_all)
        denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        return float(np.linalg.norm(num - ana) / denom), len(num)


# ---------------------------------------------------------------------------
# case registry
# ---------------------------------------------------------------------------

CASES: list[GradCase] = []


def case(name: str, shapes: list):
    def deco(make):
        CASES.append(GradCase(name, make, shapes))
        return make
    return deco


def _unary(name, op, shapes, domain="any"):
    def make(rng, shape):
        if domain == "pos":
            x = _leaf(0.5 + rng.random(shape))
        elif domain == "nonzero":
            x = _leaf(_away_from_zero(rng, shape))
        else:
            x = _leaf(rng.standard_normal(shape))
        return (lambda: op(x)), [x]
    CASES.append(GradCase(name, make, shapes))


S3 = [(4,), (3, 5), (2, 3, 4)]
_unary("exp", T.exp, S3)
_unary("log", T.log, S3, "pos")
_unary("sqrt", T.sqrt, S3, "pos")
_unary("tanh", T.tanh, S3)
_unary("sigmoid", T.sigmoid, S3)
_unary("silu", T.silu, S3)
_unary("gelu", T.gelu, [(4, 4), (3, 5), (2, 3, 4)])
_unary("relu", T.relu, S3, "nonzero")
_unary("leaky_relu", lambda x: T.leaky_relu(x, 0.2), S3, "nonzero")
_unary("absolute", T.absolute, S3, "nonzero")
_unary("power", lambda x: T.power(x, 1.7), S3, "pos")
_unary("neg", lambda x: -x, S3)
_unary("sum_all", lambda x: T.tsum(x), S3)
_unary("mean_all", lambda x: T.mean(x), S3)
_unary("softmax", lambda x: T.softmax(x, -1), [(3, 5), (4,), (2, 3, 6)])
_unary("softmax_axis0", lambda x: T.softmax(x, 0), [(3, 5), (4,), (5, 2, 3)])
_unary("log_softmax", lambda x: T.log_softmax(x, -1), [(3, 5), (4,), (2, 3, 6)])
_unary("logsumexp", lambda x: T.logsumexp(x, -1), [(3, 5), (4,), (2, 3, 6)])
_unary("l2_normalize", lambda x: T.l2_normalize(x, -1), [(3, 5), (4,), (2, 3, 6)])


@case("clip", S3)
def _clip(rng, shape):
    # keep every entry at least 0.05 away from the clip boundaries
    u = rng.uniform(-1.5, 1.5, shape)
    u = np.where(np.abs(np.abs(u) - 1.0) < 0.05, u * 0.8, u)
    x = _leaf(u)
    return (lambda: T.clip(x, -1.0, 1.0)), [x]


def _binary(name, op, pairs, b_domain="any"):
    def make(rng, shapes):
        sa, sb = shapes
        a = _leaf(rng.standard_normal(sa))
        b = _leaf(0.5 + rng.random(sb) if b_domain == "pos" else rng.standard_normal(sb))
        return (lambda: op(a, b)), [a, b]
    CASES.append(GradCase(name, make, pairs))


BCAST = [((3, 4), (3, 4)), ((2, 3, 4), (4,)), ((3, 1), (1, 5))]
_binary("add", lambda a, b: a + b, BCAST)
_binary("sub", lambda a, b: a - b, BCAST)
_binary("mul", lambda a, b: a * b, BCAST)
_binary("div", lambda a, b: a / b, BCAST, "pos")
_binary("matmul", T.matmul, [((5, 7), (7, 3)), ((2, 3, 4), (2, 4, 5)), ((2, 3, 4), (4, 2))])


@case("sum_axis", [((3, 4), 0), ((2, 3, 4), (0, 2)), ((2, 3, 4), -1)])
def _sum_axis(rng, spec):
    shape, ax = spec
    x = _leaf(rng.standard_normal(shape))
    return (lambda: T.tsum(x, ax)), [x]


@case("mean_axis_keepdims", [((3, 4), 0), ((2, 3, 4), (1, 2)), ((2, 3, 4), -1)])
def _mean_axis(rng, spec):
    shape, ax = spec
    x = _leaf(rng.standard_normal(shape))
    return (lambda: T.mean(x, ax, keepdims=True)), [x]


@case("reshape", [((3, 4), (4, 3)), ((2, 3, 4), (6, 4)), ((24,), (2, 2, 6))])
def _reshape(rng, spec):
    shape, new = spec
    x = _leaf(rng.standard_normal(shape))
    return (lambda: T.reshape(x, new)), [x]


@case("transpose", [((3, 4), (1, 0)), ((2, 3, 4), (2, 0, 1)), ((2, 3, 4, 2), (0, 2, 1, 3))])
def _transpose(rng, spec):
    shape, axes = spec
    x = _leaf(rng.standard_normal(shape))
    return (lambda: T.transpose(x, axes)), [x]


@case("getitem", [((5, 4), np.s_[1:4]), ((3, 4, 5), np.s_[..., 2:]),
                  ((6, 3), np.array([0, 2, 2, 5]))])
def _getitem(rng, spec):
    shape, idx = spec
    x = _leaf(rng.standard_normal(shape))
    return (lambda: x[idx]), [x]


@case("concat", [((2, 3), (4, 3), 0), ((2, 3), (2, 5), 1), ((2, 2, 3), (2, 1, 3), 1)])
def _concat(rng, spec):
    sa, sb, ax = spec
    a, b = _leaf(rng.standard_normal(sa)), _leaf(rng.standard_normal(sb))
    return (lambda: T.concat([a, b], ax)), [a, b]


@case("stack", [((3,), 0), ((2, 3), 1), ((2, 3), -1)])
def _stack(rng, spec):
    shape, ax = spec
    a, b = _leaf(rng.standard_normal(shape)), _leaf(rng.standard_normal(shape))
    return (lambda: T.stack([a, b], ax)), [a, b]


@case("broadcast_to", [((1, 3), (4, 3)), ((3, 1), (3, 5)), ((2, 1, 4), (2, 3, 4))])
def _bcast(rng, spec):
    shape, new = spec
    x = _leaf(rng.standard_normal(shape))
    return (lambda: T.broadcast_to(x, new)), [x]


@case("linear", [((4, 5), 3), ((2, 3, 6), 4), ((7, 2), 2)])
def _linear(rng, spec):
    shape, dout = spec
    x = _leaf(rng.standard_normal(shape))
    w = _leaf(rng.standard_normal((shape[-1], dout)) * 0.5)
    b = _leaf(rng.standard_normal(dout))
    return (lambda: T.linear(x, w, b)), [x, w, b]


@case("layer_norm", [(3, 6), (2, 4, 5), (5, 8)])
def _layer_norm(rng, shape):
    x = _leaf(rng.standard_normal(shape))
    g = _leaf(1.0 + 0.3 * rng.standard_normal(shape[-1]))
    b = _leaf(rng.standard_normal(shape[-1]))
    return (lambda: T.layer_norm(x, g, b, 1e-6)), [x, g, b]


@case("attention", [(1, 3, 4), (2, 5, 3), (2, 4, 8)])
def _attention(rng, shape):
    q, k, v = (_leaf(rng.standard_normal(shape)) for _ in range(3))
    return (lambda: T.attention(q, k, v)), [q, k, v]


@case("self_attention", [((1, 4, 12), 2), ((2, 5, 6), 1), ((2, 3, 24), 4)])
def _self_attention(rng, spec):
    shape, heads = spec
    qkv = _leaf(rng.standard_normal(shape))
    return (lambda: T.self_attention(qkv, heads)), [qkv]


@case("conv2d", [((1, 2, 6, 6), 3, 3, 1, 1), ((2, 3, 5, 5), 2, 3, 2, 1),
                 ((1, 2, 4, 4), 3, 1, 1, 0), ((1, 2, 6, 6), 2, 4, 2, 1)])
def _conv2d(rng, spec):
    shape, cout, k, stride, pad = spec
    x = _leaf(rng.standard_normal(shape))
    w = _leaf(rng.standard_normal((cout, shape[1], k, k)) * 0.5)
    b = _leaf(rng.standard_normal(cout))
    return (lambda: T.conv2d(x, w, b, stride, pad)), [x, w, b]


@case("pixel_unshuffle_grid", [((1, 4, 4, 3), 2), ((2, 6, 6, 2), 3), ((1, 4, 4, 2), 4)])
def _unshuffle(rng, spec):
    shape, r = spec
    x = _leaf(rng.standard_normal(shape))
    return (lambda: T.pixel_unshuffle_grid(x, r)), [x]


@case("pixel_shuffle_grid", [((1, 2, 2, 12), 2), ((2, 2, 2, 18), 3), ((1, 1, 1, 8), 2)])
def _shuffle(rng, spec):
    shape, r = spec
    x = _leaf(rng.standard_normal(shape))
    return (lambda: T.pixel_shuffle_grid(x, r)), [x]


@case("cross_entropy_soft", [(3, 5), (4, 2), (2, 3, 6)])
def _ce_soft(rng, shape):
    logits = _leaf(rng.standard_normal(shape))
    p = rng.random(shape)
    p /= p.sum(axis=-1, keepdims=True)
    return (lambda: T.cross_entropy_soft(p, logits, -1)), [logits]


# -- layers ------------------------------------------------------------------

def _module_case(name, build, shapes, max_params=6, kinks=False):
    """``build(rng, shape) -> (module_call, input_tensor_or_None, module)``."""
    def make(rng, shape):
        with T.default_dtype(np.float64):
            call, x, mod = build(rng, shape)
        params = [p for p in mod.parameters() if p.requires_grad]
        # a deterministic subset of parameters keeps the suite fast
        pick = [params[i] for i in _coords(len(params), rng.split("pick"), max_params)]
        leaves = ([x] if x is not None else []) + pick
        return call, leaves
    CASES.append(GradCase(name, make, shapes, kinks))


def _build_block(rng, spec):
    from .nn import TransformerBlock
    (b, s, d), heads = spec
    blk = TransformerBlock(d, heads, rng.split("blk"))
    for p in blk.parameters():  # larger weights make the check more sensitive
        p.data[...] = rng.standard_normal(p.shape) * 0.3 + (1.0 if p.name.endswith("norm1.weight")
                                                             or p.name.endswith("norm2.weight")
                                                             else 0.0)
    x = _leaf(rng.standard_normal((b, s, d)))
    return (lambda: blk(x)), x, blk


def _build_compressor(kind):
    def build(rng, spec):
        from .nn import TokenCompressor
        b, g, d = spec
        m = TokenCompressor(d, rng.split("c"), kind)
        x = _leaf(rng.standard_normal((b, g * g, d)))
        return (lambda: m(x)), x, m
    return build


def _build_expander(rng, spec):
    from .nn import TokenExpander
    b, g, d = spec
    m = TokenExpander(d, rng.split("e"))
    x = _leaf(rng.standard_normal((b, g * g, d)))
    return (lambda: m(x)), x, m


def _build_bottleneck(rng, spec):
    from .nn import LatentBottleneck
    b, g, d, r, c = spec
    m = LatentBottleneck(d, r, c, rng.split("b"))
    x = _leaf(rng.standard_normal((b, g * g, d)))
    return (lambda: m(x)), x, m


def _build_unbottleneck(rng, spec):
    from .nn import LatentUnbottleneck
    b, h, c, r, d = spec
    m = LatentUnbottleneck(c, r, d, rng.split("u"))
    z = _leaf(rng.standard_normal((b, h, h, c)))
    return (lambda: m(z)), z, m


def _build_posembed(rng, spec):
    from .nn import PositionalEmbedding
    grid, g, d = spec
    m = PositionalEmbedding(grid, d, rng.split("p"), cls_slot=True)
    return (lambda: m.grid_part(g)), None, m


def _build_patch_embed(rng, spec):
    from .nn import PatchEmbed
    b, p, hw, d = spec
    m = PatchEmbed(p, d, rng.split("pe"))
    x = _leaf(rng.standard_normal((b, 3, hw, hw)))
    return (lambda: m(x)), x, m


def _build_head(rng, spec):
    from .ssl import ProjectionHead
    b, d, k = spec
    m = ProjectionHead(d, rng.split("h"), out_dim=k, bottleneck=8)
    # unit-variance weights keep the pre-normalization norm O(1) so the
    # finite-difference step stays in the linear regime of l2-normalize
    for lin in (m.fc1, m.fc2, m.fc3):
        w = lin.weight
        w.data[...] = rng.split("w").standard_normal(w.shape) / np.sqrt(w.shape[0])
    x = _leaf(rng.standard_normal((b, d)))
    return (lambda: m(x)), x, m


def _build_perceptual(rng, spec):
    from .losses import PerceptualNet, perceptual
    b, hw = spec
    net = PerceptualNet(seed=3)
    x = Tensor(rng.uniform(-1, 1, (b, 3, hw, hw)))
    xh = _leaf(rng.uniform(-1, 1, (b, 3, hw, hw)))
    return (lambda: perceptual(x, xh, net)), xh, net


def _build_disc(rng, spec):
    from .losses import PatchDiscriminator
    b, hw, width = spec
    m = PatchDiscriminator(seed=1, width=width)
    x = _leaf(rng.uniform(-1, 1, (b, 3, hw, hw)))
    return (lambda: m(x)), x, m


def _build_dit(rng, spec):
    from .diffusion import DiT, DiTConfig
    b, h, c = spec
    net = DiT(DiTConfig(latent_size=h, channels=c, dim=8, depth=1, heads=2, num_classes=3,
                        freq_dim=8))
    for p in net.parameters():  # leave adaLN-Zero so every path is active
        p.data[...] = rng.standard_normal(p.shape) * 0.3
    x = _leaf(rng.standard_normal((b, h, h, c)))
    t = rng.random(b)
    y = rng.integers(0, 4, b)
    return (lambda: net(x, t, y)), x, net


_module_case("transformer_block", _build_block, [((1, 4, 8), 2), ((2, 3, 4), 1), ((1, 5, 6), 3)])
_module_case("compressor_conv", _build_compressor("conv"), [(1, 2, 3), (2, 4, 2), (1, 4, 4)])
_module_case("compressor_shuffle_mlp", _build_compressor("pixel_shuffle_mlp"),
             [(1, 2, 3), (2, 4, 2), (1, 4, 4)])
_module_case("expander", _build_expander, [(1, 1, 3), (2, 2, 2), (1, 3, 4)])
_module_case("latent_bottleneck", _build_bottleneck, [(1, 4, 3, 2, 2), (2, 2, 2, 1, 3),
                                                      (1, 4, 2, 4, 3)])
_module_case("latent_unbottleneck", _build_unbottleneck, [(1, 2, 3, 2, 2), (2, 1, 2, 1, 3),
                                                          (1, 2, 2, 2, 4)])
_module_case("positional_resample", _build_posembed, [(4, 2, 3), (4, 4, 2), (3, 5, 2)])
_module_case("patch_embed", _build_patch_embed, [(1, 2, 4, 3), (2, 4, 4, 2), (1, 1, 3, 2)])
_module_case("projection_head", _build_head, [(3, 4, 5), (2, 6, 3), (4, 2, 6)])
_module_case("perceptual_loss", _build_perceptual, [(1, 16), (2, 16), (1, 32)], kinks=True)
_module_case("patch_discriminator", _build_disc, [(1, 8, 4), (2, 8, 2), (1, 16, 2)],
             kinks=True)
_module_case("dit", _build_dit, [(1, 2, 2), (2, 2, 3), (1, 3, 2)])


def run_case(c: GradCase, seed: int = 0, eps: float = EPS, tol: float = TOL) -> list[GradResult]:
    out = []
    for i, shape in enumerate(c.shapes):
        rng = Stream(seed, ("gradcheck", c.name, str(i)))
        with T.default_dtype(np.float64):
            fn, leaves = c.make(rng, shape)
        err, n = check_gradients(fn, leaves, rng, eps, skip_kinks=c.kinks)
        out.append(GradResult(c.name, shape, err, n, err < tol))
    return out


def run_all(seed: int = 0, names=None, log=None) -> list[GradResult]:
    results = []
    t0 = time.perf_counter()
    for c in CASES:
        if names and c.name not in names:
            continue
        res = run_case(c, seed)
        results.extend(res)
        if log:
            worst = max(r.rel_err for r in res)
            log(f"{'PASS' if all(r.passed for r in res) else 'FAIL'} {c.name:<24} "
                f"shapes={len(res)} worst_rel_err={worst:.2e}")
    if log:
        log(f"{len(results)} checks in {time.perf_counter() - t0:.1f}s")
    return results
