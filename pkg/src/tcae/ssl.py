"""Joint self-distillation objective: multi-crop views, block masks, projection
heads, EMA teacher with centering/sharpening, and the CLS + masked-token losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data
from . import tensor as T
from .model import Encoder, TCAEConfig
from .nn import Linear, Module
from .optim import cosine_momentum, ema_update
from .rng import Stream
from .tensor import Parameter, Tensor

SSL_MODES = ("off", "dino", "ibot")


@dataclass
class AugmentationPolicy:
    n_global: int = 2
    global_size: int = 32
    global_scale: tuple[float, float] = (0.4, 1.0)
    n_local: int = 4
    local_size: int = 16
    local_scale: tuple[float, float] = (0.05, 0.4)
    flip_p: float = 0.5
    jitter: float = 0.2
    mask_ratio: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        self.global_scale = tuple(self.global_scale)
        self.local_scale = tuple(self.local_scale)
        self.mask_ratio = tuple(self.mask_ratio)
        lo, hi = self.mask_ratio
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"mask ratio range {self.mask_ratio} invalid")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def identity(cls, size: int = 32) -> "AugmentationPolicy":
        """No crop, flip, jitter or masking; useful for tests."""
        return cls(global_size=size, global_scale=(1.0, 1.0), n_local=0, flip_p=0.0,
                   jitter=0.0, mask_ratio=(0.0, 0.0))


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def block_mask(grid: int, ratio: tuple[float, float], rng: Stream,
               min_block: int = 2, aspect: float = 0.3) -> np.ndarray:
    """Boolean (grid, grid) mask built from random rectangles.

    The masked fraction is drawn uniformly in ``ratio`` and hit exactly (up to
    integer rounding kept inside the range): the last rectangle is truncated
    in raster order.
    """
    n = grid * grid
    lo, hi = ratio
    mask = np.zeros((grid, grid), dtype=bool)
    if hi <= 0:
        return mask
    kmin = math.ceil(lo * n - 1e-9)
    kmax = math.floor(hi * n + 1e-9)
    target = int(round(rng.uniform(lo, hi) * n))
    target = min(max(target, kmin), kmax)
    count = 0
    la, ha = math.log(aspect), math.log(1 / aspect)
    while count < target:
        area = rng.uniform(min_block, max(min_block, target - count) + 1e-9)
        ar = math.exp(rng.uniform(la, ha))
        h = int(round(math.sqrt(area * ar)))
        w = int(round(math.sqrt(area / ar)))
        h = min(max(h, 1), grid)
        w = min(max(w, 1), grid)
        top = int(rng.integers(0, grid - h + 1))
        left = int(rng.integers(0, grid - w + 1))
        ys, xs = np.nonzero(~mask[top:top + h, left:left + w])
        take = min(len(ys), target - count)
        mask[ys[:take] + top, xs[:take] + left] = True
        count += take
    return mask


def pool_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Any-pool a (..., g, g) mask by ``factor`` per side."""
    if factor == 1:
        return mask
    *lead, g, _ = mask.shape
    m = mask.reshape(*lead, g // factor, factor, g // factor, factor)
    return m.any(axis=(-3, -1))


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------

@dataclass
class ViewBundle:
    teacher: np.ndarray  # (n_global, B, 3, S, S)
    student: np.ndarray  # same pixels as ``teacher``
    masks: np.ndarray  # (n_global, B, g, g) bool over the input patch grid
    local: np.ndarray  # (n_local, B, 3, s, s)

    @property
    def batch(self) -> int:
        return self.teacher.shape[1]


def _augment_one(img: np.ndarray, size: int, scale, flip_p: float, jitter: float,
                 rng: Stream) -> np.ndarray:
    crop, _ = data.random_resized_crop(img, scale, size, rng.split("crop"))
    if flip_p > 0 and rng.random() < flip_p:
        crop = crop[:, :, ::-1]
    crop = data.color_jitter(crop, jitter, rng.split("jitter"))
    return np.ascontiguousarray(crop, dtype=img.dtype)


def make_views(images: np.ndarray, policy: AugmentationPolicy, rng: Stream,
               patch_size: int, masking: bool = True) -> ViewBundle:
    """Multi-crop views for a float (B, 3, H, W) batch (or a single (3, H, W) image)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b = len(images)
    g = policy.global_size // patch_size
    glob = np.empty((policy.n_global, b, 3, policy.global_size, policy.global_size),
                    images.dtype)
    loc = np.empty((policy.n_local, b, 3, policy.local_size, policy.local_size), images.dtype)
    masks = np.zeros((policy.n_global, b, g, g), dtype=bool)
    for i in range(b):
        r = rng.split(i)
        for v in range(policy.n_global):
            rv = r.split(f"g{v}")
            glob[v, i] = _augment_one(images[i], policy.global_size, policy.global_scale,
                                      policy.flip_p, policy.jitter, rv)
            if masking:
                masks[v, i] = block_mask(g, policy.mask_ratio, rv.split("mask"))
        for v in range(policy.n_local):
            loc[v, i] = _augment_one(images[i], policy.local_size, policy.local_scale,
                                     policy.flip_p, policy.jitter, r.split(f"l{v}"))
    return ViewBundle(glob, glob.copy(), masks, loc)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

class ProjectionHead(Module):
    """MLP d -> 2d -> 2d -> bottleneck, l2-normalize, weight-normalized linear to K."""

    def __init__(self, d: int, rng: Stream, out_dim: int = 1024, bottleneck: int = 256,
                 hidden: int | None = None):
        hidden = hidden or 2 * d
        self.fc1 = Linear(d, hidden, rng.split("fc1"))
        self.fc2 = Linear(hidden, hidden, rng.split("fc2"))
        self.fc3 = Linear(hidden, bottleneck, rng.split("fc3"))
        self.prototypes = Parameter(
            (rng.split("proto").standard_normal((bottleneck, out_dim)) /
             math.sqrt(bottleneck)).astype(T.get_default_dtype()))
        self.out_dim = out_dim

    def bottleneck(self, x: Tensor) -> Tensor:
        x = T.gelu(self.fc1(x))
        x = T.gelu(self.fc2(x))
        return T.l2_normalize(self.fc3(x), axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(self.bottleneck(x), T.l2_normalize(self.prototypes, axis=0))


class SSLHeads(Module):
    def __init__(self, d: int, rng: Stream, out_dim: int = 1024, bottleneck: int = 256):
        self.cls_head = ProjectionHead(d, rng.split("cls"), out_dim, bottleneck)
        self.patch_head = ProjectionHead(d, rng.split("patch"), out_dim, bottleneck)


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

@dataclass
class TeacherState:
    encoder: Encoder
    heads: SSLHeads
    cls_center: np.ndarray
    patch_center: np.ndarray
    total_steps: int
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    last_momentum: float = field(default=0.996)

    @classmethod
    def from_student(cls, encoder: Encoder, heads: SSLHeads, total_steps: int,
                     **kw) -> "TeacherState":
        cfg: TCAEConfig = encoder.cfg
        t_enc = Encoder(cfg, Stream(0, ("teacher",)))
        t_enc.load_state_dict(encoder.state_dict())
        k = heads.cls_head.out_dim
        t_heads = SSLHeads(cfg.embed_dim, Stream(0, ("teacher_heads",)), k,
                           heads.cls_head.prototypes.shape[0])
        t_heads.load_state_dict(heads.state_dict())
        for p in t_enc.parameters() + t_heads.parameters():
            p.requires_grad = False
        dt = T.get_default_dtype()
        return cls(t_enc, t_heads, np.zeros(k, dt), np.zeros(k, dt), total_steps, **kw)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.heads.parameters()

    def momentum(self, step: int) -> float:
        return cosine_momentum(step, self.total_steps, self.momentum_start, self.momentum_end)

    def probs(self, logits: np.ndarray, center: np.ndarray) -> np.ndarray:
        """Centered, sharpened teacher distribution (plain numpy; no tape)."""
        z = (logits - center) / self.teacher_temp
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TeacherOutputs:
    cls_logits: np.ndarray  # (n_global, B, K)
    patch_logits: np.ndarray  # (n_global, B, S, K)
    cls_probs: np.ndarray
    patch_probs: np.ndarray


def teacher_forward(state: TeacherState, views: ViewBundle) -> TeacherOutputs:
    ng, b = views.teacher.shape[:2]
    x = views.teacher.reshape(ng * b, *views.teacher.shape[2:])
    with T.no_grad():
        trace = state.encoder.tokens(Tensor(x))
        cls = state.heads.cls_head(trace.cls).data
        patch = state.heads.patch_head(trace.tokens).data
    cls = cls.reshape(ng, b, -1)
    patch = patch.reshape(ng, b, patch.shape[1], -1)
    return TeacherOutputs(cls, patch, state.probs(cls, state.cls_center),
                          state.probs(patch, state.patch_center))


def update_teacher(state: TeacherState, encoder: Encoder, heads: SSLHeads, step: int,
                   outputs: TeacherOutputs | None = None) -> float:
    """EMA step (after the optimizer step) and center update from teacher logits."""
    m = state.momentum(step)
    ema_update(state.encoder.parameters(), encoder.parameters(), m)
    ema_update(state.heads.parameters(), heads.parameters(), m)
    state.last_momentum = m
    if outputs is not None:
        update_centers(state, outputs.cls_logits, outputs.patch_logits)
    return m


def update_centers(state: TeacherState, cls_logits: np.ndarray,
                   patch_logits: np.ndarray | None = None) -> None:
    cm = state.center_momentum
    k = state.cls_center.shape[0]
    state.cls_center = (cm * state.cls_center +
                        (1 - cm) * cls_logits.reshape(-1, k).mean(axis=0)).astype(
        state.cls_center.dtype)
    if patch_logits is not None:
        state.patch_center = (cm * state.patch_center +
                              (1 - cm) * patch_logits.reshape(-1, k).mean(axis=0)).astype(
            state.patch_center.dtype)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _soft_ce(target: np.ndarray, student_logits: Tensor, temp: float) -> Tensor:
    """Per-row H(target, softmax(student / temp)); returns a Tensor of row losses."""
    logp = T.log_softmax(student_logits * (1.0 / temp), axis=-1)
    return -T.tsum(logp * Tensor(np.asarray(target, logp.dtype)), axis=-1)


def loss_cls(student_logits: list[Tensor], teacher_probs: list[np.ndarray],
             student_temp: float = 0.1) -> Tensor:
    """Mean over (student view j, teacher global view i), i != j, of batch-mean CE.

    Student views are ordered globals first, so view index i of the teacher
    matches student view i.
    """
    total = None
    n = 0
    for i, tp in enumerate(teacher_probs):
        for j, sl in enumerate(student_logits):
            if i == j:
                continue
            ce = T.mean(_soft_ce(tp, sl, student_temp))
            total = ce if total is None else total + ce
            n += 1
    if n == 0:
        raise ValueError("loss_cls needs at least one cross-view pair")
    return total * (1.0 / n)


def loss_mim(student_logits: Tensor, teacher_probs: np.ndarray, masks: np.ndarray,
             student_temp: float = 0.1) -> Tensor:
    """CE over masked positions only; 0 when nothing is masked.

    ``student_logits`` (N, S, K), ``teacher_probs`` (N, S, K), ``masks`` (N, S).
    """
    masks = np.asarray(masks, dtype=bool)
    if student_logits.shape[:2] != masks.shape or teacher_probs.shape != student_logits.shape:
        raise ValueError(f"grid misalignment: logits {student_logits.shape}, teacher "
                         f"{teacher_probs.shape}, masks {masks.shape}")
    count = int(masks.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=student_logits.dtype))
    ce = _soft_ce(teacher_probs, student_logits, student_temp)  # (N, S)
    w = Tensor((masks / count).astype(ce.dtype))
    return T.tsum(ce * w)


def ibot_total(cls_loss, mim_loss, mode: str = "ibot"):
    if mode == "ibot":
        return cls_loss + mim_loss
    if mode == "dino":
        return cls_loss
    raise ValueError(f"unknown SSL mode {mode!r}")


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, np.float64)
    return float(-(p * np.log(np.clip(p, 1e-300, None))).sum())


def marginal_entropy(probs: np.ndarray) -> float:
    """Entropy of the batch-mean distribution; collapse drives it toward 0."""
    k = probs.shape[-1]
    return entropy(probs.reshape(-1, k).mean(axis=0))


# ---------------------------------------------------------------------------
# one SSL forward for the student
# ---------------------------------------------------------------------------

@dataclass
class SSLTerms:
    cls: Tensor
    mim: Tensor
    total: Tensor
    teacher: TeacherOutputs
    teacher_entropy: float


def ssl_losses(encoder: Encoder, heads: SSLHeads, state: TeacherState, views: ViewBundle,
               mode: str = "ibot") -> SSLTerms:
    if mode not in ("dino", "ibot"):
        raise ValueError(f"ssl_losses needs mode dino or ibot, got {mode!r}")
    tout = teacher_forward(state, views)
    ng, b = views.student.shape[:2]
    xs = views.student.reshape(ng * b, *views.student.shape[2:])
    masks = views.masks.reshape(ng * b, -1) if mode == "ibot" else None
    trace = encoder.tokens(Tensor(xs), masks)
    s_cls = heads.cls_head(trace.cls)  # (ng*b, K)
    student_views = [s_cls[v * b:(v + 1) * b] for v in range(ng)]
    if views.local.shape[0]:
        nl = views.local.shape[0]
        xl = views.local.reshape(nl * b, *views.local.shape[2:])
        l_cls = heads.cls_head(encoder.tokens(Tensor(xl)).cls)
        student_views += [l_cls[v * b:(v + 1) * b] for v in range(nl)]
    lc = loss_cls(student_views, list(tout.cls_probs), state.student_temp)
    if mode == "ibot":
        s_patch = heads.patch_head(trace.tokens)  # (ng*b, S, K)
        factor = views.masks.shape[-1] // trace.grid
        out_mask = pool_mask(views.masks, factor).reshape(ng * b, -1)
        lm = loss_mim(s_patch, tout.patch_probs.reshape(ng * b, *tout.patch_probs.shape[2:]),
                      out_mask, state.student_temp)
    else:
        lm = Tensor(np.zeros((), dtype=lc.dtype))
    ent = marginal_entropy(tout.cls_probs)
    return SSLTerms(lc, lm, ibot_total(lc, lm, mode), tout, ent)
