import csv
import json
import logging

import numpy as np
import pytest

from tcae import checkpoint, cli, data
from tcae.diffusion import DiTConfig, DiTTrainConfig, load_samples
from tcae.losses import param_hash
from tcae.model import TCAEConfig, compression_ratios
from tcae.optim import OptimizerConfig
from tcae.ssl import AugmentationPolicy
from tcae.train import RunConfig, load_tokenizer, train_tokenizer


def tiny_run(out, **kw) -> RunConfig:
    base = RunConfig(
        run_id="tiny", n_train=64, n_val=32, n_probe_train=64,
        model=TCAEConfig(patch_size=4, embed_dim=16, heads=2, depth_stage1=1, depth_stage2=1,
                         latent_size=2, latent_channels=4),
        augment=AugmentationPolicy(local_size=16, n_local=2),
        prototypes=32, epochs=1, batch_size=16, finetune_epochs=2,
        dit=DiTConfig(latent_size=2, channels=4, dim=16, depth=1, heads=2, freq_dim=16),
        dit_train=DiTTrainConfig(epochs=1, batch_size=16),
        n_gen_samples=32, sample_steps=3, out_dir=str(out))
    d = base.to_dict()
    d.update(kw)
    return RunConfig.from_dict(d)


def write_config(tmp_path, **kw):
    run = tiny_run(tmp_path / "out", **kw)
    return run, run.save(tmp_path / "run.json")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny tokenizer run through the CLI, shared by the downstream commands."""
    tmp = tmp_path_factory.mktemp("cli")
    run, cfg = write_config(tmp)
    assert cli.main(["--config", str(cfg), "train-tokenizer"]) == 0
    return run, cfg, tmp / "out" / "tokenizer.tcae"


# -- sweeps ---------------------------------------------------------------------

def test_default_sweeps_have_fifteen_valid_cells():
    cells = [c for s in cli.default_sweeps().values() for c in s.cells()]
    assert len(cells) == 15
    assert len({c.run_id for c in cells}) == 15
    for c in cells:
        r = compression_ratios(c.model)
        assert r.pix_to_tok * r.tok_to_lat == r.pix_to_lat
        assert RunConfig.from_dict(c.to_dict()) == c


def test_stage_depth_fractions():
    assert [cli.stage_depth(f, 6) for f in (0, 0.25, 0.5, 0.75, 1.0)] == [0, 2, 3, 5, 6]


def test_sweep_cells_differ_only_on_axis():
    spec = cli.default_sweeps()["alpha"]
    a, b = (c.to_dict() for c in spec.cells()[:2])
    diff = {k for k in a if a[k] != b[k]}
    assert diff == {"weights", "run_id", "out_dir"}


def test_sweep_dry_run_ok(tmp_path):
    assert cli.main(["--out", str(tmp_path), "sweep", "stage_depth", "--dry-run"]) == 0


def test_partial_sweep_failure(tmp_path):
    code = cli.main(["--out", str(tmp_path), "sweep", "custom", "--axis", "patch_size",
                     "--values", "4", "5", "--dry-run"])
    assert code == 4
    failures = json.loads((tmp_path / "custom" / "failures.json").read_text())
    assert [f["run_id"] for f in failures] == ["custom-patch_size=5-s0"]


def test_unknown_axis_is_config_error():
    with pytest.raises(Exception):
        cli.SweepSpec("x", "depth", [1])


# -- exit codes -------------------------------------------------------------------

def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"model": {"patch_size": 5}}))
    assert cli.main(["--config", str(p), "train-tokenizer"]) == 2


def test_unknown_config_field_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"learning_rate": 1.0}))
    assert cli.main(["--config", str(p), "train-tokenizer"]) == 2


def test_missing_checkpoint_exit_code(tmp_path):
    assert cli.main(["--out", str(tmp_path), "probe", "--checkpoint",
                     str(tmp_path / "nope.tcae")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_leaves_loadable_checkpoint(tmp_path):
    opt = OptimizerConfig(base_lr=1e300, min_lr=1e300, warmup_epochs=0).to_dict()
    _, cfg = write_config(tmp_path, optim=opt, ssl_mode="off")
    assert cli.main(["--config", str(cfg), "train-tokenizer"]) == 3
    last = tmp_path / "out" / "last_good.tcae"
    model = load_tokenizer(last)
    assert all(np.isfinite(p.data).all() for p in model.parameters())
    assert not (tmp_path / "out" / "tokenizer.tcae").exists()


# -- training ---------------------------------------------------------------------

def test_train_tokenizer_is_deterministic(tmp_path):
    _, cfg = write_config(tmp_path)
    ckpt = tmp_path / "out" / "tokenizer.tcae"
    assert cli.main(["--config", str(cfg), "train-tokenizer"]) == 0
    first = checkpoint.file_hash(ckpt)
    assert cli.main(["--config", str(cfg), "train-tokenizer"]) == 0
    assert checkpoint.file_hash(ckpt) == first


def test_training_curve_columns(trained):
    _, _, ckpt = trained
    with open(ckpt.parent / "train_tokenizer.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    for k in ("pix", "perceptual", "cls", "mim", "total"):
        assert np.isfinite(float(rows[0][k]))
    meta = checkpoint.load_config(ckpt)
    assert meta["config_hash"] == RunConfig.from_dict(meta["run"]).config_hash()


def test_smoke_run_moving_average_decreases():
    # joint objective with the default prototype count; block means over 50 steps
    run = tiny_run(None, n_train=64, max_steps=200, batch_size=8, prototypes=1024,
                   optim=OptimizerConfig(base_lr=1e-3, min_lr=1e-5, warmup_epochs=1).to_dict())
    ds = data.make_synthetic(64)
    losses = []
    train_tokenizer(run, ds, None, step_hook=lambda s, info: losses.append(info["loss"]))
    assert len(losses) == 200
    blocks = np.asarray(losses).reshape(4, 50).mean(1)
    assert np.all(np.diff(blocks) < 0), blocks


def test_vanilla_baseline_condition(tmp_path):
    model = dict(tiny_run(None).model.to_dict(), staged=False)
    run = tiny_run(tmp_path, ssl_mode="off", model=model, max_steps=2)
    res = train_tokenizer(run, data.make_synthetic(32), None)
    assert res.heads is None and res.teacher is None
    assert res.history[0]["cls"] == 0.0 and res.history[0]["mim"] == 0.0


def test_finetune_freezes_encoder(trained, tmp_path):
    _, cfg, ckpt = trained
    before = param_hash(load_tokenizer(ckpt).encoder)
    out = tmp_path / "ft"
    assert cli.main(["--config", str(cfg), "--out", str(out), "finetune-decoder",
                     "--checkpoint", str(ckpt)]) == 0
    tuned = load_tokenizer(out / "tokenizer_ft.tcae")
    assert param_hash(tuned.encoder) == before
    assert param_hash(tuned.decoder) != param_hash(load_tokenizer(ckpt).decoder)
    with open(out / "finetune_decoder.csv") as f:
        rows = list(csv.DictReader(f))
    assert all(np.isfinite(float(r["disc"])) for r in rows)


def test_adversarial_schedule_rescaled():
    run = RunConfig().with_epochs(30, 5)
    w = run.finetune_weights
    assert w.lambda_g == 0.75
    assert 0 < w.disc_start_epoch <= w.adv_start_epoch < 5


# -- probe / dit / sample / eval ------------------------------------------------------

def test_probe_untrained_near_chance(tmp_path, caplog):
    run = tiny_run(tmp_path)
    model_path = tmp_path / "untrained.tcae"
    from tcae.model import TCAEModel
    TCAEModel(run.model, seed=0).save(model_path, {"run": run.to_dict()})
    cfg = run.save(tmp_path / "run.json")
    with caplog.at_level(logging.WARNING, logger="tcae"):
        assert cli.main(["--config", str(cfg), "probe", "--checkpoint", str(model_path)]) == 0
    rows = {r["metric"]: float(r["value"]) for r in csv.DictReader(open(tmp_path / "metrics.csv"))}
    assert 0.0 <= rows["probe_a1"] <= 1.0 and 0.0 <= rows["probe_a2"] <= 1.0


def test_dit_sample_eval_pipeline(trained, tmp_path):
    _, cfg, ckpt = trained
    out = tmp_path / "gen"
    assert cli.main(["--config", str(cfg), "--out", str(out), "train-dit",
                     "--checkpoint", str(ckpt)]) == 0
    dit = out / "dit.tcae"
    args = ["--config", str(cfg), "--out", str(out), "--seed", "7", "sample", "--dit",
            str(dit), "--n", "20", "--steps", "3"]
    assert cli.main(args) == 0
    first = (out / "samples.tcae").read_bytes()
    assert cli.main(args) == 0
    assert (out / "samples.tcae").read_bytes() == first
    z, index = load_samples(out / "samples.tcae")
    assert z.shape == (20, 2, 2, 4) and index["cfg_scale"] == 1.4 and index["seed"] == 7
    assert cli.main(["--config", str(cfg), "--out", str(out), "eval", "--checkpoint", str(ckpt),
                     "--samples", str(out / "samples.tcae"), "--cache",
                     str(tmp_path / "cache")]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    metrics = {r["metric"] for r in rows}
    assert {"rfid_proxy", "psnr", "ssim", "lpips_proxy", "gfid_proxy", "is_proxy"} <= metrics
    assert all(r["run_id"] and r["config_hash"] and r["seed"] for r in rows)


def test_eval_rejects_samples_from_other_tokenizer(trained, tmp_path):
    _, cfg, ckpt = trained
    other = tmp_path / "other.tcae"
    from tcae.model import TCAEModel
    TCAEModel(load_tokenizer(ckpt).config, seed=99).save(other, {})
    from tcae.diffusion import dump_samples
    fake = dump_samples(tmp_path / "s.tcae", np.zeros((2, 2, 2, 4), np.float32),
                        np.zeros(2, int), 0, 1.4, 3,
                        {"tokenizer_fingerprint": load_tokenizer(ckpt).fingerprint,
                         "tokenizer_weights": param_hash(load_tokenizer(ckpt))})
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "eval", "--checkpoint",
                     str(other), "--samples", str(fake)]) == 2


def test_gradcheck_command():
    assert cli.main(["gradcheck", "--only", "relu", "softmax"]) == 0


def test_real_vs_real_floor(tmp_path):
    # 2000 vs 2000 disjoint val images, extractor trained on 2000; measured once
    args = ["--out", str(tmp_path), "eval", "--real-vs-real", "--n-train", "2000",
            "--n-val", "4000", "--cache", str(tmp_path / "cache")]
    assert cli.main(args) == 0
    rows = {r["metric"]: float(r["value"]) for r in csv.DictReader(open(tmp_path / "metrics.csv"))}
    assert rows["gfid_proxy_floor"] < 0.5
    assert rows["gfid_proxy_floor"] == pytest.approx(0.269922, rel=1e-4)


def test_eval_needs_checkpoint(tmp_path):
    assert cli.main(["--out", str(tmp_path), "eval"]) == 2
