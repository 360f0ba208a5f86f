import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tcae import tensor as T
from tcae.model import TCAEConfig, TCAEModel
from tcae.rng import Stream
from tcae.ssl import (AugmentationPolicy, ProjectionHead, SSLHeads, TeacherState,
                      block_mask, entropy, ibot_total, loss_cls, loss_mim, make_views,
                      pool_mask, ssl_losses, update_centers, update_teacher)
from tcae.tensor import Tensor

CFG = TCAEConfig(image_size=16, patch_size=2, embed_dim=16, heads=2, depth_stage1=1,
                 depth_stage2=1, latent_size=2, latent_channels=4)


def imgs(n=2, size=16, seed=0):
    return Stream(seed).uniform(-1, 1, (n, 3, size, size)).astype(np.float32)


def setup(k=32, seed=0):
    model = TCAEModel(CFG, seed)
    heads = SSLHeads(CFG.embed_dim, Stream(seed, ("heads",)), out_dim=k, bottleneck=8)
    state = TeacherState.from_student(model.encoder, heads, total_steps=10)
    return model, heads, state


def small_policy(**kw):
    base = dict(global_size=16, local_size=8, n_local=2)
    base.update(kw)
    return AugmentationPolicy(**base)


# -- views and masks ------------------------------------------------------------

def test_identity_policy_returns_input():
    x = imgs(2)
    v = make_views(x, AugmentationPolicy.identity(16), Stream(0), 2)
    for g in range(2):
        np.testing.assert_allclose(v.teacher[g], x, atol=1e-6)
    assert not v.masks.any() and v.local.shape[0] == 0


def test_zero_mask_student_equals_teacher():
    v = make_views(imgs(2), small_policy(mask_ratio=(0.0, 0.0)), Stream(1), 2)
    np.testing.assert_array_equal(v.student, v.teacher)
    assert not v.masks.any()


def test_views_deterministic_and_sized():
    pol = small_policy()
    a = make_views(imgs(2), pol, Stream(2), 2)
    b = make_views(imgs(2), pol, Stream(2), 2)
    for f in ("teacher", "student", "masks", "local"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert a.teacher.shape == (2, 2, 3, 16, 16) and a.local.shape == (2, 2, 3, 8, 8)
    assert a.masks.shape == (2, 2, 8, 8)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 16), st.integers(0, 10_000))
def test_mask_fraction_in_range(grid, seed):
    m = block_mask(grid, (0.1, 0.5), Stream(seed))
    frac = m.mean()
    assert 0.1 <= frac <= 0.5


def test_pool_mask_any():
    m = np.zeros((4, 4), bool)
    m[0, 1] = True
    m[3, 3] = True
    np.testing.assert_array_equal(pool_mask(m, 2), [[True, False], [False, True]])


# -- heads ----------------------------------------------------------------------

def test_projection_head_shapes_and_norm():
    head = ProjectionHead(16, Stream(0), out_dim=64, bottleneck=8)
    x = Tensor(Stream(1).standard_normal((5, 16)).astype(np.float32))
    assert head(x).shape == (5, 64)
    nrm = np.linalg.norm(head.bottleneck(x).data, axis=-1)
    np.testing.assert_allclose(nrm, 1.0, atol=1e-5)


# -- losses --------------------------------------------------------------------

def test_loss_cls_one_hot_limit():
    tp = [np.array([[1.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])]
    losses = []
    for gap in (0.05, 0.3, 2.0):
        s = Tensor(np.array([[gap, 0.0, 0.0]]))
        losses.append(loss_cls([s, s], tp).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-6


def test_loss_cls_uniform_teacher_bound():
    tp = [np.full((3, 4), 0.25)] * 2
    uni = Tensor(np.zeros((3, 4)))
    assert loss_cls([uni, uni], tp).item() == pytest.approx(math.log(4), abs=1e-12)
    rnd = Tensor(Stream(0).standard_normal((3, 4)))
    assert loss_cls([rnd, rnd], tp).item() > math.log(4)


def test_loss_cls_symmetric_equals_entropy():
    rng = Stream(3)
    logits = rng.standard_normal((4, 6))
    p = np.exp(logits / 0.1)
    p /= p.sum(-1, keepdims=True)
    s = Tensor(logits)
    out = loss_cls([s, s], [p, p], student_temp=0.1).item()
    assert out == pytest.approx(np.mean([entropy(r) for r in p]), rel=1e-10)


def test_loss_cls_excludes_same_view():
    p0 = np.array([[1.0, 0.0]])
    p1 = np.array([[0.0, 1.0]])
    s0 = Tensor(np.array([[0.0, 50.0]]))  # agrees with teacher view 1 only
    s1 = Tensor(np.array([[50.0, 0.0]]))  # agrees with teacher view 0 only
    assert loss_cls([s0, s1], [p0, p1]).item() < 1e-6


def test_loss_mim_empty_mask():
    s = Tensor(np.ones((2, 4, 3)))
    assert loss_mim(s, np.full((2, 4, 3), 1 / 3), np.zeros((2, 4), bool)).item() == 0.0


def test_loss_mim_full_mask_matched_distribution():
    logits = Stream(1).standard_normal((2, 4, 5))
    p = np.exp(logits / 0.1)
    p /= p.sum(-1, keepdims=True)
    out = loss_mim(Tensor(logits), p, np.ones((2, 4), bool)).item()
    assert out == pytest.approx(np.mean([entropy(r) for r in p.reshape(-1, 5)]), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 4, 3), elements=st.floats(-20, 20)),
       hnp.arrays(bool, (2, 4)))
def test_loss_mim_ignores_unmasked_logits(noise, masks):
    base = Stream(0).standard_normal((2, 4, 3))
    tp = np.full((2, 4, 3), 1 / 3)
    pert = base + noise * (~masks)[..., None]
    a = loss_mim(Tensor(base), tp, masks).item()
    b = loss_mim(Tensor(pert), tp, masks).item()
    assert a == b


def test_loss_mim_misaligned():
    with pytest.raises(ValueError):
        loss_mim(Tensor(np.ones((2, 4, 3))), np.ones((2, 9, 3)) / 3, np.ones((2, 4), bool))


def test_ibot_total_modes():
    assert ibot_total(1.2, 0.8, "ibot") == pytest.approx(2.0)
    assert ibot_total(1.2, 0.8, "dino") == 1.2
    assert ibot_total(0.0, 0.0, "ibot") == 0.0


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3, 5), elements=st.floats(-5, 5)))
def test_gibbs_bound(tl, sl):
    tp = np.exp(tl - tl.max(-1, keepdims=True))
    tp /= tp.sum(-1, keepdims=True)
    s = Tensor(sl)
    val = loss_cls([s, s], [tp, tp]).item()
    assert val >= 0
    assert val >= np.mean([entropy(r) for r in tp]) - 1e-9


# -- teacher ------------------------------------------------------------------

def test_momentum_endpoint_freezes_teacher():
    model, heads, state = setup()
    before = [p.data.copy() for p in state.parameters()]
    for p in model.encoder.parameters():
        p.data += 1.0
    m = update_teacher(state, model.encoder, heads, step=9)
    assert m == 1.0
    for a, p in zip(before, state.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_center_converges_geometrically():
    _, _, state = setup(k=4)
    target = np.array([1.0, -2.0, 0.5, 3.0], np.float32)
    logits = np.broadcast_to(target, (2, 3, 4))
    for n in range(1, 30):
        update_centers(state, logits)
        np.testing.assert_allclose(state.cls_center, target * (1 - 0.9 ** n), rtol=1e-5)


def test_teacher_outside_tape():
    model, heads, state = setup()
    views = make_views(imgs(2), small_policy(), Stream(5), 2)
    before = [p.data.copy() for p in state.parameters()]
    terms = ssl_losses(model.encoder, heads, state, views, "ibot")
    T.backward(terms.total)
    assert all(not p.requires_grad for p in state.parameters())
    for a, p in zip(before, state.parameters()):
        np.testing.assert_array_equal(a, p.data)
        assert not p.grad.any()
    assert any(p.grad.any() for p in model.encoder.parameters())
    assert not any(p.grad.any() for p in model.decoder.parameters())


def test_identity_views_cls_loss_equals_teacher_entropy():
    # Matched temperatures and zero center: the student's distribution equals the
    # teacher's, so cross-entropy collapses to the teacher entropy.
    model, heads, state = setup()
    state.student_temp = state.teacher_temp
    views = make_views(imgs(3), AugmentationPolicy.identity(16), Stream(0), 2, masking=False)
    terms = ssl_losses(model.encoder, heads, state, views, "dino")
    ent = np.mean([entropy(r) for r in terms.teacher.cls_probs[0]])
    assert terms.cls.item() == pytest.approx(ent, rel=1e-5)
    assert terms.mim.item() == 0.0


def test_default_temperatures_exceed_teacher_entropy():
    model, heads, state = setup()
    views = make_views(imgs(3), AugmentationPolicy.identity(16), Stream(0), 2, masking=False)
    terms = ssl_losses(model.encoder, heads, state, views, "dino")
    ent = np.mean([entropy(r) for r in terms.teacher.cls_probs[0]])
    assert terms.cls.item() >= ent


def test_dino_mode_skips_masking_and_mim():
    model, heads, state = setup()
    views = make_views(imgs(2), small_policy(), Stream(6), 2)
    terms = ssl_losses(model.encoder, heads, state, views, "dino")
    assert terms.mim.item() == 0.0 and terms.total.item() == terms.cls.item()
