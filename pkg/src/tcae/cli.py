"""Command-line entry point.

    tcae [--config run.json] [--seed S] [--out DIR] [--threads N] [--f64-check] <command> ...

Exit codes: 0 success, 2 config error, 3 numerical abort, 4 partial sweep failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, data, diffusion, evaluate, gradcheck, metrics
from . import tensor as T
from .losses import param_hash
from .model import ConfigError, compression_ratios
from .rng import Stream
from .train import (NumericalAbort, RunConfig, finetune_decoder, load_splits, load_tokenizer,
                    train_tokenizer)

log = logging.getLogger("tcae")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4

SWEEP_AXES = ("patch_size", "stage_depth_M", "alpha", "compressor_kind", "ssl_mode",
              "staged_flag")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def stage_depth(fraction: float, depth: int) -> int:
    """Encoder blocks before the compressor for a fractional split (round half up)."""
    return int(np.floor(fraction * depth + 0.5))


@dataclass
class SweepSpec:
    name: str
    axis: str
    values: list
    base: RunConfig = field(default_factory=RunConfig)
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}")

    def cell(self, value, seed: int) -> RunConfig:
        d = self.base.to_dict()
        m = d["model"]
        if self.axis == "patch_size":
            m["patch_size"] = int(value)
        elif self.axis == "stage_depth_M":
            depth = m["depth_stage1"] + m["depth_stage2"]
            m["depth_stage1"] = stage_depth(float(value), depth)
            m["depth_stage2"] = depth - m["depth_stage1"]
        elif self.axis == "alpha":
            d["weights"]["alpha"] = float(value)
        elif self.axis == "compressor_kind":
            m["compressor"] = str(value)
        elif self.axis == "ssl_mode":
            d["ssl_mode"] = str(value)
        elif self.axis == "staged_flag":
            m["staged"] = bool(value)
        d["seed"] = int(seed)
        d["run_id"] = f"{self.name}-{self.axis}={value}-s{seed}"
        d["out_dir"] = str(Path(self.base.out_dir) / self.name / f"{self.axis}={value}"
                           / f"s{seed}")
        return RunConfig.from_dict(d)

    def cells(self) -> list[RunConfig]:
        return [self.cell(v, s) for v in self.values for s in self.seeds]


def default_sweeps(base: RunConfig | None = None) -> dict[str, SweepSpec]:
    """Patch size (single-bottleneck base), stage depth, alpha, compressor, staged on/off."""
    base = base or RunConfig()
    vanilla = RunConfig.from_dict({**base.to_dict(),
                                   "model": {**base.model.to_dict(), "staged": False}})
    return {
        "patch": SweepSpec("patch", "patch_size", [8, 4, 2], vanilla),
        "stage_depth": SweepSpec("stage_depth", "stage_depth_M", [0.0, 0.25, 0.5, 0.75, 1.0],
                                 base),
        "alpha": SweepSpec("alpha", "alpha", [0.1, 1.0, 10.0], base),
        "compressor": SweepSpec("compressor", "compressor_kind", ["conv", "pixel_shuffle_mlp"],
                                base),
        "staged": SweepSpec("staged", "staged_flag", [True, False], base),
    }


# ---------------------------------------------------------------------------
# pipeline pieces shared by commands and sweep cells
# ---------------------------------------------------------------------------

def _extractor(run: RunConfig, train_ds: data.Dataset, cache: Path) -> metrics.FeatureExtractor:
    tag = f"{run.dataset}{len(train_ds)}d{run.data_seed}"
    return metrics.load_or_train_extractor(cache, data.to_model_space(train_ds.images),
                                           train_ds.labels, tag, seed=0, log=log.info)


def run_cell(run: RunConfig, cache: Path, with_generation: bool = True) -> metrics.MetricsReport:
    """Tokenizer -> probe -> reconstruction metrics -> DiT -> generation metrics."""
    out = Path(run.out_dir)
    run.save(out / "run.json")
    train_ds, val_ds = load_splits(run)
    res = train_tokenizer(run, train_ds, out, log=log.info)
    report = metrics.MetricsReport(run.run_id, run.config_hash(), run.seed)
    pr = evaluate.probe(res.model, train_ds, val_ds, run.n_probe_train)
    evaluate.write_probe_report(report, pr)
    ext = _extractor(run, train_ds, cache)
    rm = evaluate.recon_metrics(res.model, data.to_model_space(val_ds.images), ext)
    for k in ("psnr", "ssim", "lpips_proxy", "l1", "rfid_proxy"):
        report.add(k, getattr(rm, k))
    if with_generation:
        g = evaluate.generation_eval(res.model, train_ds, val_ds, ext, run.dit, run.dit_train,
                                     run.n_gen_samples, run.sample_steps, seed=run.seed,
                                     log=log.info)
        report.add("gfid_proxy", g.gfid_proxy)
        report.add("is_proxy", g.is_proxy)
    report.add("extractor_version", int(ext.version[:8], 16), "meta")
    report.write(out / "metrics.csv", append=False)
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    d = run.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out_dir"] = args.out
    for k in ("epochs", "batch_size", "max_steps", "n_train", "n_val", "ssl_mode", "dataset"):
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    run = RunConfig.from_dict(d)
    if getattr(args, "epochs", None) is not None:
        run = run.with_epochs(args.epochs, run.finetune_epochs)
    return run


def cmd_train_tokenizer(args) -> int:
    run = _run_config(args)
    out = Path(run.out_dir)
    run.save(out / "run.json")
    train_ds, _ = load_splits(run)
    try:
        res = train_tokenizer(run, train_ds, out, log=log.info)
    except NumericalAbort as e:
        log.error("%s; last good checkpoint: %s", e, e.last_good)
        return EXIT_NUMERIC
    log.info("checkpoint %s sha256=%s", res.checkpoint, checkpoint.file_hash(res.checkpoint))
    return EXIT_OK


def cmd_finetune_decoder(args) -> int:
    run = _run_config(args)
    model = load_tokenizer(args.checkpoint)
    train_ds, _ = load_splits(run)
    res = finetune_decoder(run, model, train_ds, Path(run.out_dir), log=log.info)
    log.info("checkpoint %s", res.checkpoint)
    return EXIT_OK


def cmd_train_dit(args) -> int:
    run = _run_config(args)
    model = load_tokenizer(args.checkpoint)
    train_ds, _ = load_splits(run)
    _, lat = evaluate.encode_dataset(model, data.to_model_space(train_ds.images))
    stats = diffusion.LatentStats.fit(lat)
    cfg = diffusion.DiTConfig.from_dict({**run.dit.to_dict(), "latent_size": lat.shape[1],
                                         "channels": lat.shape[-1]})
    net, hist = diffusion.train_dit(diffusion.normalize(lat, stats).astype(np.float32),
                                    train_ds.labels, cfg, run.dit_train, log=log.info)
    path = net.save(Path(run.out_dir) / "dit.tcae",
                    {"latent_stats": stats.to_dict(), "tokenizer": str(args.checkpoint),
                     "tokenizer_fingerprint": model.fingerprint,
                     "tokenizer_weights": param_hash(model), "history": hist})
    log.info("dit checkpoint %s", path)
    return EXIT_OK


def _load_dit(path):
    meta = checkpoint.load_config(path)
    return diffusion.DiT.load(path), diffusion.LatentStats.from_dict(meta["latent_stats"]), meta


def cmd_sample(args) -> int:
    run = _run_config(args)
    net, stats, meta = _load_dit(args.dit)
    cfg = net.config
    scale = cfg.cfg_scale if args.cfg_scale is None else args.cfg_scale
    labels = np.arange(args.n) % cfg.num_classes if args.label is None \
        else np.full(args.n, args.label)
    z = diffusion.sample(net, labels, args.steps, scale, Stream(run.seed, ("sample",)),
                         (cfg.latent_size, cfg.latent_size, cfg.channels), cfg.null_class)
    z = diffusion.denormalize(z, stats)
    path = diffusion.dump_samples(Path(run.out_dir) / "samples.tcae", z, labels, run.seed,
                                  scale, args.steps,
                                  {"tokenizer_fingerprint": meta.get("tokenizer_fingerprint"),
                                   "tokenizer_weights": meta.get("tokenizer_weights")})
    log.info("samples %s sha256=%s", path, checkpoint.file_hash(path))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _run_config(args)
    if not args.real_vs_real and not args.checkpoint:
        log.error("eval needs --checkpoint unless --real-vs-real is given")
        return EXIT_CONFIG
    train_ds, val_ds = load_splits(run)
    cache = Path(args.cache or Path(run.out_dir) / "cache")
    ext = _extractor(run, train_ds, cache)
    report = metrics.MetricsReport(run.run_id, run.config_hash(), run.seed)
    if args.real_vs_real:
        # two disjoint halves of the val split: the finite-sample floor of gfid_proxy
        x = data.to_model_space(val_ds.images)
        half = len(x) // 2
        report.add("gfid_proxy_floor", evaluate.real_vs_real_floor(ext, x[:half], x[half:2 * half]))
        return _write_eval(report, run)
    model = load_tokenizer(args.checkpoint)
    rm = evaluate.recon_metrics(model, data.to_model_space(val_ds.images), ext)
    report.add("rfid_proxy", rm.rfid_proxy)
    report.add("psnr", rm.psnr)
    report.add("ssim", rm.ssim)
    report.add("lpips_proxy", rm.lpips_proxy)
    if args.samples:
        z, index = diffusion.load_samples(args.samples)
        fp = index.get("tokenizer_fingerprint")
        if fp is not None and fp != model.fingerprint:
            log.error("samples were drawn for tokenizer %s, not %s", fp, model.fingerprint)
            return EXIT_CONFIG
        wh = index.get("tokenizer_weights")
        if wh is not None and wh != param_hash(model):
            log.error("samples were drawn for different tokenizer weights")
            return EXIT_CONFIG
        imgs = np.clip(evaluate.decode_latents(model, z), -1, 1)
        f_gen, p_gen = ext.embed(imgs)
        f_real, _ = ext.embed(data.to_model_space(val_ds.images))
        report.add("gfid_proxy", metrics.feature_fid(metrics.GaussianStats.from_features(f_real),
                                                     metrics.GaussianStats.from_features(f_gen)))
        report.add("is_proxy", metrics.is_proxy(p_gen))
    return _write_eval(report, run)


def _write_eval(report: metrics.MetricsReport, run: RunConfig) -> int:
    path = report.write(Path(run.out_dir) / "metrics.csv")
    for r in report.rows:
        print(f"{r.metric:<16} {r.value:.6g}")
    log.info("metrics appended to %s", path)
    return EXIT_OK


def cmd_probe(args) -> int:
    run = _run_config(args)
    model = load_tokenizer(args.checkpoint)
    train_ds, val_ds = load_splits(run)
    pr = evaluate.probe(model, train_ds, val_ds, run.n_probe_train)
    report = metrics.MetricsReport(run.run_id, run.config_hash(), run.seed)
    evaluate.write_probe_report(report, pr)
    report.write(Path(run.out_dir) / "metrics.csv")
    name = f"p={model.config.patch_size}" + (" staged" if model.config.staged else "")
    for line in evaluate.probe_table_rows({name: pr}):
        print(line)
    if pr.a1 < 0.2:
        log.warning("A1 = %.3f is near chance; structure loss is low-confidence", pr.a1)
    return EXIT_OK


def _sweep_cell(spec: SweepSpec, value, seed: int, cache: Path, args, rows: list,
                failures: list) -> None:
    """Build and run one cell; any config or numerical failure is recorded, not raised."""
    run_id = f"{spec.name}-{spec.axis}={value}-s{seed}"
    try:
        cell = spec.cell(value, seed)
        if args.dry_run:
            log.info("%s ratios=%s", cell.run_id, tuple(compression_ratios(cell.model)))
            return
        rows.extend(run_cell(cell, cache, not args.no_generation).rows)
    except (ConfigError, NumericalAbort, ValueError, FloatingPointError) as e:
        log.error("cell %s failed: %s", run_id, e)
        failures.append({"run_id": run_id, "error": str(e),
                         "trace": traceback.format_exc(limit=3)})


def cmd_sweep(args) -> int:
    base = _run_config(args)
    sweeps = default_sweeps(base)
    if args.name not in sweeps:
        if not args.axis or not args.values:
            raise ConfigError(f"unknown sweep {args.name!r}; give --axis and --values")
        spec = SweepSpec(args.name, args.axis, [_parse_value(v) for v in args.values], base)
    else:
        spec = sweeps[args.name]
    if args.seeds:
        spec.seeds = args.seeds
    cache = Path(base.out_dir) / "cache"
    rows, failures = [], []
    for value in spec.values:
        for seed in spec.seeds:
            _sweep_cell(spec, value, seed, cache, args, rows, failures)
    rows.sort(key=lambda r: (r.run_id, r.metric, r.split))
    out = Path(base.out_dir) / spec.name
    if rows:
        metrics.write_rows(out / "aggregate.csv", rows, append=False)
    if failures:
        out.mkdir(parents=True, exist_ok=True)
        (out / "failures.json").write_text(json.dumps(failures, indent=2))
        return EXIT_PARTIAL
    return EXIT_OK


def _parse_value(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    return v


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed or 0, args.only, log=print)
    return EXIT_OK if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcae", description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, help="RunConfig JSON")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", help="output directory (overrides out_dir)")
    ap.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    ap.add_argument("--f64-check", action="store_true",
                    help="run in float64 so reruns can be compared bitwise")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def budget(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-steps", dest="max_steps", type=int)
        p.add_argument("--n-train", dest="n_train", type=int)
        p.add_argument("--n-val", dest="n_val", type=int)
        p.add_argument("--ssl-mode", dest="ssl_mode", choices=["off", "dino", "ibot"])
        p.add_argument("--dataset", choices=["synthetic", "cifar10"])

    p = sub.add_parser("train-tokenizer", help="joint SSL + reconstruction training")
    budget(p)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("finetune-decoder", help="decoder-only finetune with GAN loss")
    budget(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune_decoder)

    p = sub.add_parser("train-dit", help="train the latent flow model")
    budget(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_train_dit)

    p = sub.add_parser("sample", help="draw latents from a trained DiT")
    p.add_argument("--dit", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--label", type=int)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="reconstruction and generation metrics")
    budget(p)
    p.add_argument("--checkpoint")
    p.add_argument("--samples", help="sample dump from the sample command")
    p.add_argument("--real-vs-real", action="store_true",
                   help="only the gfid_proxy floor between two halves of the val split")
    p.add_argument("--cache", help="feature extractor cache directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="linear probes on tokens (A1) and latents (A2)")
    budget(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="run an ablation sweep end to end")
    budget(p)
    p.add_argument("name", help="patch | stage_depth | alpha | compressor | staged | custom")
    p.add_argument("--axis", choices=SWEEP_AXES)
    p.add_argument("--values", nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--no-generation", action="store_true", help="skip DiT and gFID")
    p.add_argument("--dry-run", action="store_true", help="only validate cell configs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--only", nargs="+", help="case names")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    t0 = time.perf_counter()
    try:
        if args.f64_check:
            with T.default_dtype(np.float64):
                code = args.func(args)
        else:
            code = args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        code = EXIT_CONFIG
    except (FileNotFoundError, checkpoint.CheckpointError, data.DataError) as e:
        log.error("%s", e)
        code = EXIT_CONFIG
    except FloatingPointError as e:
        log.error("numerical abort: %s", e)
        code = EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.unregister()
    log.debug("done in %.1fs", time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
