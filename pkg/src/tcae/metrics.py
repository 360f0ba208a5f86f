"""Reconstruction metrics, Frechet distance / IS proxies, linear probing and the
structure-loss diagnostic."""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import checkpoint
from . import tensor as T
from .nn import Conv2d, Linear, Module
from .optim import OptimizerConfig, Schedule, adamw_step
from .rng import Stream
from .tensor import Tensor

PSNR_CAP = 99.0


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; 99 dB when MSE < 1e-10."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _windows(img: np.ndarray, win: int, stride: int) -> np.ndarray:
    h, w = img.shape[-2:]
    ys = range(0, h - win + 1, stride)
    xs = range(0, w - win + 1, stride)
    return np.stack([img[..., i:i + win, j:j + win] for i in ys for j in xs], axis=-3)


def ssim(x: np.ndarray, y: np.ndarray, win: int = 8, stride: int = 4,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over uniform ``win`` windows of the channel-mean grayscale.

    Accepts (H, W), (C, H, W) or (B, C, H, W); batches are averaged.
    """
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim >= 3:
        x = x.mean(axis=-3)
        y = y.mean(axis=-3)
    if min(x.shape[-2:]) < win:
        raise MetricError(f"image {x.shape[-2:]} smaller than {win}x{win} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    wx = _windows(x, win, stride)
    wy = _windows(y, win, stride)
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = wx.var(axis=(-2, -1))
    vy = wy.var(axis=(-2, -1))
    cov = ((wx - mx[..., None, None]) * (wy - my[..., None, None])).mean(axis=(-2, -1))
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# distributional
# ---------------------------------------------------------------------------

@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, np.float64)
        s = np.asarray(self.sigma, np.float64)
        self.sigma = 0.5 * (s + s.T)

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        f = np.asarray(feats, np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise MetricError("need a (n >= 2, d) feature matrix")
        return cls(f.mean(axis=0), np.cov(f, rowvar=False))


def _psd_sqrt(s: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    if w.min() < -tol:
        raise MetricError(f"covariance not PSD: min eigenvalue {w.min():.3e}")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def feature_fid(a: GaussianStats, b: GaussianStats, jitter: float = 1e-8) -> float:
    """Frechet distance between two Gaussians.

    Tr((Sa Sb)^1/2) is computed as Tr((Sa^1/2 Sb Sa^1/2)^1/2), which keeps every
    square root symmetric PSD and is exact for any pair of PSD matrices.
    """
    if a.mu.shape != b.mu.shape:
        raise MetricError("feature dims differ")
    d = a.mu.shape[0]
    eye = np.eye(d) * jitter
    sa = a.sigma + eye
    sb = b.sigma + eye
    ra = _psd_sqrt(sa, 1e-8 + jitter)
    _psd_sqrt(sb, 1e-8 + jitter)  # validates sb
    m = ra @ sb @ ra
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    tr_cross = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = a.mu - b.mu
    val = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_cross)
    return max(val, 0.0)


def is_proxy(probs: np.ndarray, tol: float = 1e-4) -> float:
    """exp(mean KL(p(y|x) || p(y))) over rows of class posteriors."""
    p = np.asarray(probs, np.float64)
    if p.ndim != 2 or (p < -tol).any() or np.abs(p.sum(axis=1) - 1.0).max() > tol:
        raise MetricError("rows must be probability vectors")
    marg = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marg)), 0.0)
    return float(math.exp(terms.sum(axis=1).mean()))


# ---------------------------------------------------------------------------
# linear probing
# ---------------------------------------------------------------------------

@dataclass
class ProbeFit:
    weights: np.ndarray  # (d + 1, K) incl. bias row
    mean: np.ndarray
    scale: np.ndarray
    iterations: int
    grad_norm: float
    losses: list

    def predict(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, np.float64) - self.mean) / self.scale
        z = np.hstack([z, np.ones((len(z), 1))])
        return np.argmax(z @ self.weights, axis=1)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_probe(features: np.ndarray, labels: np.ndarray, l2: float = 1e-4,
                tol: float = 1e-5, max_iter: int = 5000, num_classes: int | None = None
                ) -> ProbeFit:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized; the step is 1/L with L the Lipschitz bound of the
    gradient, so the loss is monotone non-increasing.
    """
    x = np.asarray(features, np.float64)
    y = np.asarray(labels).astype(np.int64)
    if len(np.unique(y)) < 2:
        raise MetricError("probe needs at least two classes")
    k = num_classes or int(y.max()) + 1
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = np.hstack([(x - mean) / scale, np.ones((len(x), 1))])
    n = len(z)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    # softmax-CE Hessian is bounded by 0.5 * X^T X / n
    lip = 0.5 * np.linalg.norm(z, 2) ** 2 / n + l2
    step = 1.0 / lip
    w = np.zeros((z.shape[1], k))
    losses = []
    gnorm = float("inf")
    it = 0
    for it in range(1, max_iter + 1):
        p = _softmax_rows(z @ w)
        reg = w.copy()
        reg[-1] = 0.0  # bias not penalized
        g = z.T @ (p - onehot) / n + l2 * reg
        gnorm = float(np.linalg.norm(g))
        if it == 1 or it % 50 == 0:
            ll = -np.log(np.clip(p[np.arange(n), y], 1e-300, None)).mean()
            losses.append(float(ll + 0.5 * l2 * (reg ** 2).sum()))
        if gnorm < tol:
            break
        w -= step * g
    return ProbeFit(w, mean, scale, it, gnorm, losses)


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, heldout: tuple,
                     l2: float = 1e-4, tol: float = 1e-5, max_iter: int = 5000) -> float:
    """Train on (features, labels); return accuracy on ``heldout = (features, labels)``."""
    hx, hy = heldout
    k = int(max(np.max(labels), np.max(hy))) + 1
    fit = train_probe(features, labels, l2, tol, max_iter, num_classes=k)
    return float(np.mean(fit.predict(hx) == np.asarray(hy)))


def structure_loss(a1: float, a2: float) -> float:
    if a1 == 0:
        raise MetricError("structure loss undefined for A1 = 0")
    return 1.0 - a2 / a1


@dataclass
class ProbeResult:
    a1: float
    a2: float

    @property
    def structure_loss(self) -> float:
        return structure_loss(self.a1, self.a2)

    @property
    def preservation(self) -> float:
        return self.a2 / self.a1


# ---------------------------------------------------------------------------
# feature extractor (stand-in for a pretrained classifier)
# ---------------------------------------------------------------------------

class FeatureExtractor(Module):
    """Four stride-2 conv stages, global average pool, 128-d features, 10-way head."""

    def __init__(self, seed: int = 0, width: int = 32, num_classes: int = 10):
        rng = Stream(seed, ("feature_extractor",))
        chans = [3, width // 2, width, 2 * width, 4 * width]
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng.split(f"c{i}"), stride=2, padding=1)
                      for i in range(4)]
        self.fc = Linear(chans[-1], 128, rng.split("fc"), std=None)
        self.head = Linear(128, num_classes, rng.split("head"), std=None)
        self.version = ""
        # fixed after training so real features have unit mean per-dimension variance
        self.feature_scale = 1.0

    def calibrate(self, images: np.ndarray) -> float:
        f, _ = self.embed(images, scaled=False)
        var = float(np.var(f, axis=0).mean())
        self.feature_scale = 1.0 / np.sqrt(var) if var > 0 else 1.0
        return self.feature_scale

    def features(self, x: Tensor) -> Tensor:
        for c in self.convs:
            x = T.relu(c(x))
        x = T.mean(x, axis=(2, 3))
        return T.relu(self.fc(x))

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def embed(self, images: np.ndarray, batch: int = 256,
              scaled: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(features, softmax probs) for float images in [-1, 1]."""
        feats, probs = [], []
        with T.no_grad():
            for i in range(0, len(images), batch):
                f = self.features(Tensor(np.asarray(images[i:i + batch], np.float32)))
                logits = self.head(f).data.astype(np.float64)
                feats.append(f.data.astype(np.float64))
                probs.append(_softmax_rows(logits))
        f = np.concatenate(feats)
        return (f * self.feature_scale if scaled else f), np.concatenate(probs)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, np.float32).tobytes())
        h.update(np.float64(self.feature_scale).tobytes())
        return h.hexdigest()[:16]


def train_feature_extractor(images: np.ndarray, labels: np.ndarray, epochs: int = 8,
                            batch: int = 64, seed: int = 0, lr: float = 2e-3,
                            log=None) -> FeatureExtractor:
    """Supervised training on float [-1, 1] images with flip augmentation."""
    net = FeatureExtractor(seed)
    params = net.parameters()
    cfg = OptimizerConfig(base_lr=lr, min_lr=lr * 0.01, weight_decay=1e-4, warmup_epochs=1)
    steps_per_epoch = len(images) // batch
    sched = Schedule(cfg, steps_per_epoch, steps_per_epoch * epochs)
    step = 0
    for ep in range(epochs):
        order = Stream(seed, ("fe_shuffle", str(ep))).permutation(len(images))
        flips = Stream(seed, ("fe_flip", str(ep))).random(len(images)) < 0.5
        tot = 0.0
        for i in range(steps_per_epoch):
            idx = order[i * batch:(i + 1) * batch]
            x = np.array(images[idx], np.float32)
            f = flips[idx]
            x[f] = x[f, :, :, ::-1]
            net.zero_grad()
            logits = net(Tensor(x))
            loss = -T.mean(T.tsum(T.log_softmax(logits, -1) *
                                  Tensor(np.eye(10, dtype=np.float32)[labels[idx]]), axis=-1))
            T.backward(loss)
            adamw_step(params, cfg, step, sched.lr(step))
            step += 1
            tot += loss.item()
        if log:
            log(f"feature extractor epoch {ep + 1}/{epochs} loss {tot / steps_per_epoch:.4f}")
    net.calibrate(images)
    net.version = net.fingerprint()
    return net


def load_or_train_extractor(cache_dir: str | os.PathLike, images: np.ndarray,
                            labels: np.ndarray, tag: str, seed: int = 0, epochs: int = 8,
                            log=None) -> FeatureExtractor:
    """Train once per (dataset tag, seed); later calls load the cached weights."""
    path = Path(cache_dir) / f"feature_extractor_{tag}_s{seed}.tcae"
    net = FeatureExtractor(seed)
    meta = checkpoint.load_config(path) if path.exists() else {}
    if "feature_scale" in meta:  # caches written before calibration are retrained
        net.load_state_dict(checkpoint.load(path))
        net.feature_scale = float(meta["feature_scale"])
        net.version = net.fingerprint()
        return net
    net = train_feature_extractor(images, labels, epochs=epochs, seed=seed, log=log)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, net.state_dict(), {"kind": "feature_extractor", "tag": tag,
                                             "seed": seed, "version": net.version,
                                             "feature_scale": net.feature_scale})
    return net


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_HEADER = ("run_id", "config_hash", "metric", "value", "split", "seed")


@dataclass
class MetricRow:
    run_id: str
    config_hash: str
    metric: str
    value: float
    split: str
    seed: int

    def as_tuple(self) -> tuple:
        return (self.run_id, self.config_hash, self.metric, repr(float(self.value)),
                self.split, str(self.seed))


class MetricsReport:
    def __init__(self, run_id: str, config_hash: str, seed: int):
        self.run_id = run_id
        self.config_hash = config_hash
        self.seed = seed
        self.rows: list[MetricRow] = []

    def add(self, metric: str, value: float, split: str = "val") -> None:
        self.rows.append(MetricRow(self.run_id, self.config_hash, metric, float(value),
                                   split, self.seed))

    def write(self, path: str | os.PathLike, append: bool = True) -> Path:
        return write_rows(path, self.rows, append)

    def as_dict(self) -> dict[str, float]:
        return {r.metric: r.value for r in self.rows}


def write_rows(path: str | os.PathLike, rows: Iterable[MetricRow], append: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or not append or path.stat().st_size == 0
    with open(path, "w" if not append else "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow(r.as_tuple())
    return path


def read_rows(path: str | os.PathLike) -> list[MetricRow]:
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if tuple(r.fieldnames or ()) != REPORT_HEADER:
            raise MetricError(f"unexpected CSV header {r.fieldnames}")
        return [MetricRow(d["run_id"], d["config_hash"], d["metric"], float(d["value"]),
                          d["split"], int(d["seed"])) for d in r]
