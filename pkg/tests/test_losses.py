import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcae import data
from tcae import tensor as T
from tcae.gradcheck import check_gradients
from tcae.losses import (FINETUNE_WEIGHTS, JOINT_WEIGHTS, LossWeights, PatchDiscriminator,
                         PerceptualNet, adversarial_pair, param_hash, perceptual, pixel_l1,
                         total_loss)
from tcae.model import TCAEConfig, TCAEModel
from tcae.optim import OptimizerConfig, adamw_step
from tcae.rng import Stream
from tcae.tensor import Tensor


def img(n=2, size=16, seed=0):
    return Tensor(Stream(seed).uniform(-1, 1, (n, 3, size, size)).astype(np.float32))


# -- pixel / perceptual ------------------------------------------------------------

def test_pixel_l1_examples():
    x = img()
    assert pixel_l1(x, x).item() == 0.0
    z = Tensor(np.zeros((1, 3, 4, 4)))
    assert pixel_l1(z, Tensor(np.full((1, 3, 4, 4), 0.5))).item() == 0.5


def test_pixel_l1_elementwise_oracle():
    a = Stream(1).standard_normal((2, 3, 4, 4))
    b = Stream(2).standard_normal((2, 3, 4, 4))
    acc = 0.0
    for u, v in zip(a.reshape(-1), b.reshape(-1)):
        acc += abs(u - v)
    out = pixel_l1(Tensor(a), Tensor(b)).item()
    assert out == pytest.approx(acc / a.size, rel=1e-12)


def test_pixel_l1_shape_mismatch():
    with pytest.raises(ValueError):
        pixel_l1(img(1, 16), img(1, 8))


def test_perceptual_identity_and_interpolation():
    net = PerceptualNet()
    x, far = img(4, 16, 1), img(4, 16, 2)
    mid = Tensor(0.5 * (x.data + far.data))
    assert perceptual(x, x, net).item() == 0.0
    assert perceptual(x, mid, net).item() < perceptual(x, far, net).item()


def test_perceptual_penalizes_pixel_shuffling():
    net = PerceptualNet()
    ds = data.make_synthetic(100, data.SyntheticSpec(seed=3))
    x = data.to_model_space(ds.images)
    noisy = x + Stream(0).normal(0, 0.05, x.shape).astype(np.float32)
    perm = Stream(1).permutation(32 * 32)
    shuffled = noisy.reshape(100, 3, -1)[:, :, perm].reshape(x.shape)
    with T.no_grad():
        aligned = [perceptual(Tensor(x[i:i + 1]), Tensor(noisy[i:i + 1]), net).item()
                   for i in range(100)]
        mixed = [perceptual(Tensor(x[i:i + 1]), Tensor(shuffled[i:i + 1]), net).item()
                 for i in range(100)]
    assert all(m > a for a, m in zip(aligned, mixed))


def test_perceptual_net_deterministic_and_frozen():
    x = img(2, 16)
    fa = [f.data for f in PerceptualNet(7).features(x)]
    fb = [f.data for f in PerceptualNet(7).features(x)]
    for a, b in zip(fa, fb):
        np.testing.assert_array_equal(a, b)
    assert PerceptualNet(7).parameters_frozen()


# -- adversarial --------------------------------------------------------------

def const_disc(real_val, fake_val, real):
    def disc(t):
        v = real_val if t.data is real.data or np.array_equal(t.data, real.data) else fake_val
        return t * 0.0 + v
    return disc


def test_zero_discriminator():
    x, xh = img(1, 8, 1), img(1, 8, 2)
    gen, d = adversarial_pair(x, xh, lambda t: T.tsum(t, axis=1) * 0.0)
    assert d.item() == 2.0 and gen.item() == 0.0


def test_saturated_hinge():
    x, xh = img(1, 8, 1), img(1, 8, 2)
    _, d = adversarial_pair(x, xh, const_disc(2.0, -2.0, x))
    assert d.item() == 0.0


def test_generator_loss_gradient():
    rng = Stream(4)
    with T.default_dtype(np.float64):
        disc = PatchDiscriminator(seed=1, width=4)
        xh = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)))
        err, _ = check_gradients(lambda: adversarial_pair(x, xh, disc)[0], [xh], rng)
    assert err < 1e-5


def test_discriminator_and_autoencoder_updates_are_disjoint():
    cfg = TCAEConfig(image_size=16, patch_size=2, embed_dim=16, heads=2, depth_stage1=1,
                     depth_stage2=1, latent_size=2, latent_channels=4)
    ae = TCAEModel(cfg)
    disc = PatchDiscriminator(width=8)
    ae_ids = {id(p) for p in ae.parameters()}
    assert ae_ids.isdisjoint(id(p) for p in disc.parameters())
    opt = OptimizerConfig(base_lr=1e-2, weight_decay=0.0)
    x = img(2, 16)
    # discriminator step
    h_ae = param_hash(ae)
    xh = ae.reconstruct(x)
    _, d_loss = adversarial_pair(x, xh, disc)
    T.backward(d_loss)
    adamw_step(disc.parameters(), opt, 0)
    assert param_hash(ae) == h_ae
    # generator step
    h_d = param_hash(disc)
    ae.zero_grad()
    disc.zero_grad()
    gen, _ = adversarial_pair(x, ae.reconstruct(x), disc)
    T.backward(gen)
    adamw_step(ae.parameters(), opt, 0)
    assert param_hash(disc) == h_d and param_hash(ae) != h_ae


# -- weights / total -------------------------------------------------------------

def test_total_loss_example():
    w = LossWeights(alpha=0.1, lambda_p=1.0, lambda_g=0.0)
    out = total_loss({"pix": 1.0, "perceptual": 2.0, "gen": 5.0}, 3.0, w)
    assert out == pytest.approx(3.3)


def test_total_loss_alpha_zero():
    w = LossWeights(alpha=0.0)
    assert total_loss({"pix": 4.0, "perceptual": 1.0}, 2.5, w) == 2.5


@pytest.mark.parametrize("alpha", [0.1, 1.0, 10.0])
def test_alpha_selectable_from_config(alpha):
    from tcae.train import RunConfig
    run = RunConfig.from_dict({**RunConfig().to_dict(),
                               "weights": {**JOINT_WEIGHTS.to_dict(), "alpha": alpha}})
    assert run.weights.alpha == alpha
    assert total_loss({"pix": 1.0}, 0.0, run.weights) == pytest.approx(alpha)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)
    w = LossWeights()
    w.lambda_p = -1.0
    with pytest.raises(ValueError):
        total_loss({"pix": 1.0}, 0.0, w)


def test_phase_presets():
    assert JOINT_WEIGHTS.lambda_g == 0.0 and JOINT_WEIGHTS.alpha == 0.1
    assert FINETUNE_WEIGHTS.lambda_g == 0.75
    assert (FINETUNE_WEIGHTS.disc_start_epoch, FINETUNE_WEIGHTS.adv_start_epoch) == (6, 8)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10),
       st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5),
       st.sampled_from(["pix", "perceptual", "gen", "ibot"]), st.floats(-3, 3))
def test_total_loss_linear_in_each_term(a, lp, lg, pix, perc, gen, ib, which, delta):
    w = LossWeights(alpha=a, lambda_p=lp, lambda_g=lg)
    terms = {"pix": pix, "perceptual": perc, "gen": gen}
    base = total_loss(terms, ib, w)
    coef = {"pix": a, "perceptual": a * lp, "gen": a * lg, "ibot": 1.0}[which]
    if which == "ibot":
        moved = total_loss(terms, ib + delta, w)
    else:
        moved = total_loss({**terms, which: terms[which] + delta}, ib, w)
    assert moved - base == pytest.approx(coef * delta, abs=1e-9)
