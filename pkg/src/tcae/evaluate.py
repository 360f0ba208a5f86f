"""End-to-end evaluation: linear probes on tokens vs latents, reconstruction
metrics, and the latent-generation pipeline scored with the feature proxies."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data
from . import tensor as T
from .diffusion import (DiT, DiTConfig, DiTTrainConfig, LatentStats, denormalize, normalize,
                        sample, train_dit)
from .losses import PerceptualNet, perceptual
from .metrics import (FeatureExtractor, GaussianStats, MetricsReport, ProbeResult,
                      feature_fid, fit_linear_probe, is_proxy, psnr, ssim)
from .model import LatentBatch, TCAEModel
from .rng import Stream
from .tensor import Tensor


def encode_dataset(model: TCAEModel, images: np.ndarray, batch: int = 128
                   ) -> tuple[np.ndarray, np.ndarray]:
    """(pooled pre-bottleneck tokens (N, d), latents (N, h, w, c)) for float images."""
    toks, lats = [], []
    with T.no_grad():
        for i in range(0, len(images), batch):
            z, trace = model.encode(Tensor(np.asarray(images[i:i + batch], np.float32)))
            toks.append(trace.tokens.data.mean(axis=1).astype(np.float64))
            lats.append(z.values.data)
    return np.concatenate(toks), np.concatenate(lats)


def decode_latents(model: TCAEModel, latents: np.ndarray, batch: int = 128) -> np.ndarray:
    outs = []
    with T.no_grad():
        for i in range(0, len(latents), batch):
            lb = LatentBatch(Tensor(np.asarray(latents[i:i + batch], np.float32)),
                             model.fingerprint)
            outs.append(model.decode(lb).data)
    return np.concatenate(outs)


def probe(model: TCAEModel, train_ds: data.Dataset, val_ds: data.Dataset,
          n_train: int = 10_000) -> ProbeResult:
    """A1 on mean-pooled final pre-bottleneck tokens, A2 on h x w mean-pooled latents."""
    tr = train_ds.head(n_train)
    tok_tr, lat_tr = encode_dataset(model, data.to_model_space(tr.images))
    tok_va, lat_va = encode_dataset(model, data.to_model_space(val_ds.images))
    a1 = fit_linear_probe(tok_tr, tr.labels, (tok_va, val_ds.labels))
    pool = lambda z: z.reshape(len(z), -1, z.shape[-1]).mean(axis=1).astype(np.float64)
    a2 = fit_linear_probe(pool(lat_tr), tr.labels, (pool(lat_va), val_ds.labels))
    return ProbeResult(a1, a2)


def reconstruct(model: TCAEModel, images: np.ndarray, batch: int = 128) -> np.ndarray:
    _, lats = encode_dataset(model, images, batch)
    return decode_latents(model, lats, batch)


@dataclass
class ReconMetrics:
    psnr: float
    ssim: float
    lpips_proxy: float
    l1: float
    rfid_proxy: float | None = None


def recon_metrics(model: TCAEModel, images: np.ndarray, extractor: FeatureExtractor | None = None,
                  pnet: PerceptualNet | None = None) -> ReconMetrics:
    """Metrics on [0, 1]-mapped images; reconstructions are clamped here, not in the model."""
    rec = reconstruct(model, images)
    x01, r01 = data.to_unit(images), data.to_unit(rec)
    p = float(np.mean([psnr(a, b) for a, b in zip(x01, r01)]))
    s = ssim(x01, r01)
    l1 = float(np.abs(np.clip(rec, -1, 1) - images).mean())
    pnet = pnet or PerceptualNet()
    with T.no_grad():
        lp = float(np.mean([perceptual(Tensor(images[i:i + 256].astype(np.float32)),
                                       Tensor(np.clip(rec[i:i + 256], -1, 1).astype(np.float32)),
                                       pnet).item()
                            for i in range(0, len(images), 256)]))
    rfid = None
    if extractor is not None:
        fr, _ = extractor.embed(images)
        fx, _ = extractor.embed(np.clip(rec, -1, 1))
        rfid = feature_fid(GaussianStats.from_features(fr), GaussianStats.from_features(fx))
    return ReconMetrics(p, s, lp, l1, rfid)


@dataclass
class GenerationResult:
    gfid_proxy: float
    is_proxy: float
    samples: np.ndarray  # decoded images in [-1, 1]
    labels: np.ndarray
    dit: DiT
    stats: LatentStats
    history: list


def generation_eval(model: TCAEModel, train_ds: data.Dataset, val_ds: data.Dataset,
                    extractor: FeatureExtractor, dit_config: DiTConfig,
                    dit_train: DiTTrainConfig, n_samples: int = 2_000, steps: int = 50,
                    cfg_scale: float | None = None, seed: int = 0, log=None
                    ) -> GenerationResult:
    """Train a DiT on the tokenizer's latents, sample, decode and score against val reals."""
    _, lat = encode_dataset(model, data.to_model_space(train_ds.images))
    stats = LatentStats.fit(lat)
    zn = normalize(lat, stats).astype(np.float32)
    cfg = DiTConfig.from_dict({**dit_config.to_dict(), "latent_size": lat.shape[1],
                               "channels": lat.shape[-1]})
    net, hist = train_dit(zn, train_ds.labels, cfg, dit_train, log=log)
    labels = np.arange(n_samples) % cfg.num_classes
    s = cfg.cfg_scale if cfg_scale is None else cfg_scale
    rng = Stream(seed, ("sample",))
    chunks = []
    for i in range(0, n_samples, 250):
        chunks.append(sample(net, labels[i:i + 250], steps, s, rng.split(i),
                             (cfg.latent_size, cfg.latent_size, cfg.channels), cfg.null_class))
    gen = denormalize(np.concatenate(chunks), stats)
    imgs = np.clip(decode_latents(model, gen), -1, 1)
    f_gen, p_gen = extractor.embed(imgs)
    f_real, _ = extractor.embed(data.to_model_space(val_ds.images))
    gfid = feature_fid(GaussianStats.from_features(f_real), GaussianStats.from_features(f_gen))
    return GenerationResult(gfid, is_proxy(p_gen), imgs, labels, net, stats, hist)


def real_vs_real_floor(extractor: FeatureExtractor, a: np.ndarray, b: np.ndarray) -> float:
    fa, _ = extractor.embed(a)
    fb, _ = extractor.embed(b)
    return feature_fid(GaussianStats.from_features(fa), GaussianStats.from_features(fb))


def probe_table_rows(results: dict[str, ProbeResult]) -> list[str]:
    """Probe results laid out as: setting | A1 | A2 | 1 - A2/A1."""
    lines = [f"{'setting':<24} {'A1':>7} {'A2':>7} {'1-A2/A1':>8}"]
    for name, r in results.items():
        lines.append(f"{name:<24} {100 * r.a1:7.1f} {100 * r.a2:7.2f} "
                     f"{r.structure_loss:8.2f}")
    return lines


def write_probe_report(report: MetricsReport, result: ProbeResult, split: str = "val") -> None:
    report.add("probe_a1", result.a1, split)
    report.add("probe_a2", result.a2, split)
    report.add("structure_loss", result.structure_loss, split)


def report_path(out_dir: str | os.PathLike) -> Path:
    return Path(out_dir) / "metrics.csv"
