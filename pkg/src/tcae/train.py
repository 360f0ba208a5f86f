"""Run configuration plus the tokenizer training loops (joint SSL + reconstruction,
then decoder finetuning with a patch discriminator)."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint, data
from . import tensor as T
from .diffusion import DiTConfig, DiTTrainConfig
from .losses import (FINETUNE_WEIGHTS, JOINT_WEIGHTS, LossWeights, PatchDiscriminator,
                     PerceptualNet, hinge_d_loss, hinge_g_loss, perceptual, pixel_l1,
                     total_loss)
from .model import ConfigError, TCAEConfig, TCAEModel
from .optim import DECODER_FINETUNE, JOINT_TRAINING, OptimizerConfig, Schedule, adamw_step, \
    clip_grad_norm
from .rng import Stream
from .ssl import SSL_MODES, AugmentationPolicy, SSLHeads, TeacherState, make_views, \
    ssl_losses, update_teacher
from .tensor import NonFiniteError, Tensor

# reference schedule lengths the epoch-indexed events are defined against
REF_JOINT_EPOCHS = 50
REF_FINETUNE_EPOCHS = 16


class NumericalAbort(RuntimeError):
    def __init__(self, msg: str, last_good: Path | None):
        super().__init__(msg)
        self.last_good = last_good


def rescale_epoch(epoch: int, ref_total: int, total: int) -> int:
    """Map an event epoch from a ref_total-epoch schedule onto total epochs (round half up)."""
    return int(math.floor(epoch * total / ref_total + 0.5))


def joint_optim(epochs: int) -> OptimizerConfig:
    d = JOINT_TRAINING.to_dict()
    d["warmup_epochs"] = rescale_epoch(JOINT_TRAINING.warmup_epochs, REF_JOINT_EPOCHS, epochs)
    return OptimizerConfig(**d)


def finetune_optim(epochs: int) -> OptimizerConfig:
    d = DECODER_FINETUNE.to_dict()
    d["warmup_epochs"] = rescale_epoch(DECODER_FINETUNE.warmup_epochs, REF_FINETUNE_EPOCHS,
                                       epochs)
    return OptimizerConfig(**d)


def finetune_weights(epochs: int) -> LossWeights:
    w = FINETUNE_WEIGHTS
    return LossWeights(w.alpha, w.lambda_p, w.lambda_g,
                       rescale_epoch(w.disc_start_epoch, REF_FINETUNE_EPOCHS, epochs),
                       rescale_epoch(w.adv_start_epoch, REF_FINETUNE_EPOCHS, epochs))


@dataclass
class RunConfig:
    run_id: str = "run"
    dataset: str = "synthetic"
    n_train: int = 10_000
    n_val: int = 2_000
    n_probe_train: int = 10_000
    data_seed: int = 0
    model: TCAEConfig = field(default_factory=TCAEConfig)
    ssl_mode: str = "ibot"
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    prototypes: int = 1024
    weights: LossWeights = field(default_factory=lambda: JOINT_WEIGHTS)
    optim: OptimizerConfig = field(default_factory=lambda: joint_optim(30))
    epochs: int = 30
    max_steps: int = 0  # 0 = run all epochs
    batch_size: int = 32
    finetune_epochs: int = 5
    finetune_optim: OptimizerConfig = field(default_factory=lambda: finetune_optim(5))
    finetune_weights: LossWeights = field(default_factory=lambda: finetune_weights(5))
    perceptual_seed: int = 1234
    dit: DiTConfig = field(default_factory=DiTConfig)
    dit_train: DiTTrainConfig = field(default_factory=DiTTrainConfig)
    n_gen_samples: int = 2_000
    sample_steps: int = 50
    seed: int = 0
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.ssl_mode not in SSL_MODES:
            raise ConfigError(f"ssl_mode must be one of {SSL_MODES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.augment.global_size != self.model.image_size:
            raise ConfigError("global crop size must equal the model image size")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown RunConfig fields: {sorted(extra)}")
        kw = dict(d)
        try:
            if "model" in kw:
                kw["model"] = TCAEConfig.from_dict(kw["model"])
            if "augment" in kw:
                kw["augment"] = AugmentationPolicy(**kw["augment"])
            for k in ("weights", "finetune_weights"):
                if k in kw:
                    kw[k] = LossWeights(**kw[k])
            for k in ("optim", "finetune_optim"):
                if k in kw:
                    kw[k] = OptimizerConfig(**kw[k])
            if "dit" in kw:
                kw["dit"] = DiTConfig.from_dict(kw["dit"])
            if "dit_train" in kw:
                kw["dit_train"] = DiTTrainConfig(**kw["dit_train"])
            return cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("run_id")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_epochs(self, epochs: int, finetune_epochs: int | None = None) -> "RunConfig":
        """Copy with new budgets and every epoch-indexed event rescaled to match."""
        d = self.to_dict()
        d["epochs"] = epochs
        d["optim"] = joint_optim(epochs).to_dict()
        if finetune_epochs is not None:
            d["finetune_epochs"] = finetune_epochs
            d["finetune_optim"] = finetune_optim(finetune_epochs).to_dict()
            d["finetune_weights"] = finetune_weights(finetune_epochs).to_dict()
        return RunConfig.from_dict(d)


def load_splits(run: RunConfig) -> tuple[data.Dataset, data.Dataset]:
    train = data.load_dataset(run.dataset, "train", run.n_train, run.data_seed)
    val = data.load_dataset(run.dataset, "val" if run.dataset == "synthetic" else "test",
                            run.n_val, run.data_seed)
    return train, val


# ---------------------------------------------------------------------------
# joint training
# ---------------------------------------------------------------------------

CURVE_FIELDS = ("epoch", "steps", "lr", "pix", "perceptual", "cls", "mim", "total",
                "teacher_entropy", "seconds")


@dataclass
class TokenizerRun:
    model: TCAEModel
    heads: SSLHeads | None
    teacher: TeacherState | None
    history: list[dict]
    checkpoint: Path | None
    steps: int


def _write_curve(path: Path, rows: list[dict], fieldnames) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fieldnames})


def _save_tokenizer(model: TCAEModel, run: RunConfig, path: Path, extra: dict) -> Path:
    meta = {"run": run.to_dict(), "config_hash": run.config_hash()}
    meta.update(extra)
    return model.save(path, meta)


def train_tokenizer(run: RunConfig, train_ds: data.Dataset, out_dir: str | os.PathLike | None,
                    log=None, step_hook=None) -> TokenizerRun:
    """Joint training: alpha * reconstruction + SSL objective.

    ``step_hook(step, info)`` is called after every optimizer step (tests use
    it to inspect the teacher). A non-finite value anywhere aborts the run with
    ``NumericalAbort`` after pointing at the last good checkpoint.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cfg = run.model
    model = TCAEModel(cfg, seed=run.seed)
    use_ssl = run.ssl_mode != "off"
    heads = SSLHeads(cfg.embed_dim, Stream(run.seed, ("heads",)), run.prototypes) \
        if use_ssl else None
    pnet = PerceptualNet(run.perceptual_seed) if run.weights.lambda_p > 0 else None
    b = run.batch_size
    spe = len(train_ds) // b
    if spe == 0:
        raise ConfigError(f"dataset of {len(train_ds)} images smaller than batch {b}")
    total = run.max_steps or spe * run.epochs
    epochs = math.ceil(total / spe)
    teacher = TeacherState.from_student(model.encoder, heads, total) if use_ssl else None
    params = model.parameters() + (heads.parameters() if heads else [])
    sched = Schedule(run.optim, spe, total)
    rng = Stream(run.seed, ("views",))

    last_good = None
    if out is not None:
        last_good = _save_tokenizer(model, run, out / "last_good.tcae", {"step": 0})
    history: list[dict] = []
    step = 0
    for ep in range(epochs):
        t0 = time.perf_counter()
        acc = {k: 0.0 for k in ("pix", "perceptual", "cls", "mim", "total",
                                "teacher_entropy")}
        n = 0
        for xb, _ in data.batches(train_ds, b, run.data_seed + run.seed, ep):
            if step >= total:
                break
            lr = sched.lr(step)
            try:
                model.zero_grad()
                if heads:
                    heads.zero_grad()
                x = Tensor(xb)
                z, _ = model.encode(x)
                xh = model.decode(z)
                rec = {"pix": pixel_l1(x, xh)}
                if pnet is not None:
                    rec["perceptual"] = perceptual(x, xh, pnet)
                terms = None
                if use_ssl:
                    views = make_views(xb, run.augment, rng.split(step), cfg.patch_size,
                                       masking=run.ssl_mode == "ibot")
                    terms = ssl_losses(model.encoder, heads, teacher, views, run.ssl_mode)
                loss = total_loss(rec, terms.total if terms else None, run.weights)
                lv = loss.item()
                if not math.isfinite(lv):
                    raise NonFiniteError("loss", 1)
                T.backward(loss)
                if run.optim.grad_clip:
                    clip_grad_norm(params, run.optim.grad_clip)
                adamw_step(params, run.optim, step, lr)
                for p in params:
                    if not np.isfinite(p.data).all():
                        raise NonFiniteError(f"adamw:{p.name}", int((~np.isfinite(p.data)).sum()))
                if use_ssl:
                    update_teacher(teacher, model.encoder, heads, step, terms.teacher)
            except NonFiniteError as e:
                msg = f"non-finite value at step {step} (epoch {ep + 1}): {e}"
                if log:
                    log(msg)
                if out is not None:
                    _write_curve(out / "train_tokenizer.csv", history, CURVE_FIELDS)
                raise NumericalAbort(msg, last_good) from e
            acc["pix"] += rec["pix"].item()
            acc["perceptual"] += rec["perceptual"].item() if "perceptual" in rec else 0.0
            if terms is not None:
                acc["cls"] += terms.cls.item()
                acc["mim"] += terms.mim.item()
                acc["teacher_entropy"] += terms.teacher_entropy
            acc["total"] += lv
            n += 1
            if step_hook is not None:
                step_hook(step, {"model": model, "heads": heads, "teacher": teacher,
                                 "loss": lv, "terms": terms})
            step += 1
        if n == 0:
            break
        row = {"epoch": ep + 1, "steps": step, "lr": lr,
               **{k: v / n for k, v in acc.items()},
               "seconds": round(time.perf_counter() - t0, 3)}
        history.append(row)
        if log:
            log("epoch {epoch} step {steps} pix {pix:.4f} perc {perceptual:.4f} cls {cls:.4f} "
                "mim {mim:.4f} total {total:.4f} H_t {teacher_entropy:.3f} "
                "({seconds:.1f}s)".format(**row))
        if out is not None:
            last_good = _save_tokenizer(model, run, out / "last_good.tcae", {"step": step})
            _write_curve(out / "train_tokenizer.csv", history, CURVE_FIELDS)
    ckpt = None
    if out is not None:
        ckpt = _save_tokenizer(model, run, out / "tokenizer.tcae", {"step": step})
        if heads is not None:
            checkpoint.save(out / "ssl_heads.tcae", heads.state_dict(),
                            {"kind": "ssl_heads", "prototypes": run.prototypes})
    return TokenizerRun(model, heads, teacher, history, ckpt, step)


# ---------------------------------------------------------------------------
# decoder finetuning
# ---------------------------------------------------------------------------

FINETUNE_FIELDS = ("epoch", "steps", "lr", "pix", "perceptual", "gen", "disc", "seconds")


@dataclass
class FinetuneRun:
    model: TCAEModel
    discriminator: PatchDiscriminator
    history: list[dict]
    checkpoint: Path | None


def finetune_decoder(run: RunConfig, model: TCAEModel, train_ds: data.Dataset,
                     out_dir: str | os.PathLike | None, log=None) -> FinetuneRun:
    """Encoder frozen; decoder trained on reconstruction plus (later) the hinge GAN term."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    w = run.finetune_weights
    opt = run.finetune_optim
    disc = PatchDiscriminator(seed=run.seed)
    pnet = PerceptualNet(run.perceptual_seed) if w.lambda_p > 0 else None
    dec_params = model.decoder.parameters()
    disc_params = disc.parameters()
    b = run.batch_size
    spe = len(train_ds) // b
    total = spe * run.finetune_epochs
    sched = Schedule(opt, spe, max(total, 1))
    history = []
    step = 0
    d_step = 0
    for ep in range(run.finetune_epochs):
        t0 = time.perf_counter()
        use_adv = ep >= w.adv_start_epoch and w.lambda_g > 0
        use_disc = ep >= w.disc_start_epoch
        acc = {"pix": 0.0, "perceptual": 0.0, "gen": 0.0, "disc": 0.0}
        n = 0
        for xb, _ in data.batches(train_ds, b, run.data_seed + run.seed + 1, ep):
            lr = sched.lr(step)
            x = Tensor(xb)
            with T.no_grad():
                z, _ = model.encode(x)
            model.decoder.zero_grad()
            xh = model.decode(z)
            rec = {"pix": pixel_l1(x, xh)}
            if pnet is not None:
                rec["perceptual"] = perceptual(x, xh, pnet)
            if use_adv:
                rec["gen"] = hinge_g_loss(disc(xh))
            loss = total_loss(rec, None, w)
            T.backward(loss)
            adamw_step(dec_params, opt, step, lr)
            if use_disc:
                disc.zero_grad()
                d_loss = hinge_d_loss(disc(x), disc(Tensor(xh.data)))
                T.backward(d_loss)
                adamw_step(disc_params, opt, d_step, lr)
                d_step += 1
                acc["disc"] += d_loss.item()
            for k in ("pix", "perceptual", "gen"):
                if k in rec:
                    acc[k] += rec[k].item()
            n += 1
            step += 1
        row = {"epoch": ep + 1, "steps": step, "lr": lr,
               **{k: v / max(n, 1) for k, v in acc.items()},
               "seconds": round(time.perf_counter() - t0, 3)}
        history.append(row)
        if log:
            log("finetune epoch {epoch} pix {pix:.4f} perc {perceptual:.4f} gen {gen:.4f} "
                "disc {disc:.4f} ({seconds:.1f}s)".format(**row))
    ckpt = None
    if out is not None:
        _write_curve(out / "finetune_decoder.csv", history, FINETUNE_FIELDS)
        ckpt = _save_tokenizer(model, run, out / "tokenizer_ft.tcae", {"finetuned": True})
        checkpoint.save(out / "discriminator.tcae", disc.state_dict(), {"kind": "discriminator"})
    return FinetuneRun(model, disc, history, ckpt)


def load_tokenizer(path) -> TCAEModel:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return TCAEModel.load(path)
