import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tcae import tensor as T
from tcae.gradcheck import check_gradients
from tcae.optim import (OptimizerConfig, Schedule, adamw_step, cosine_momentum,
                        ema_update)
from tcae.rng import Stream
from tcae.tensor import GraphConsumedError, NonFiniteError, Parameter, Tensor


def f64(a, grad=True):
    return Tensor(np.asarray(a, np.float64), requires_grad=grad)


# -- backward -----------------------------------------------------------

def test_backward_sum_of_squares():
    x = Parameter(np.array([1.0, 2.0]))
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_gelu_matches_finite_difference():
    rng = Stream(3)
    with T.default_dtype(np.float64):
        x = f64(rng.standard_normal((4, 4)))
        err, n = check_gradients(lambda: T.gelu(x), [x], rng)
    assert n == 16 and err < 1e-5


def test_unreachable_parameter_keeps_zero_grad():
    a = Parameter(np.ones(3))
    b = Parameter(np.ones(3))
    T.backward(T.tsum(a * 2.0))
    np.testing.assert_array_equal(b.grad, 0.0)
    np.testing.assert_array_equal(a.grad, 2.0)


def test_backward_rejects_non_scalar():
    x = Parameter(np.ones(3))
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_graph_cannot_be_replayed():
    x = Parameter(np.ones(3))
    loss = T.tsum(x * x)
    T.backward(loss)
    with pytest.raises(GraphConsumedError):
        T.backward(loss)


def test_shared_subexpression_accumulates():
    x = Parameter(np.array([3.0]))
    y = x * x
    T.backward(T.tsum(y + y))
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_records_nothing():
    x = Parameter(np.ones(2))
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


# -- matmul -------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_matches_triple_loop():
    rng = Stream(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    out = T.matmul(f64(a), f64(b)).data
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_matmul_empty_contraction():
    out = T.matmul(Tensor(np.zeros((2, 0))), Tensor(np.zeros((0, 2)))).data
    np.testing.assert_array_equal(out, np.zeros((2, 2)))


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# -- softmax / layernorm --------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25)


def test_softmax_large_logits_stable():
    out = T.softmax(Tensor(np.array([1000.0, 0.0]))).data
    np.testing.assert_array_equal(out, [1.0, 0.0])


def test_softmax_gradient():
    rng = Stream(1)
    x = f64(rng.standard_normal((3, 5)))
    err, _ = check_gradients(lambda: T.softmax(x, axis=-1), [x], rng)
    assert err < 1e-5


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)),
       st.integers(0, 2))
def test_softmax_is_simplex(x, ax):
    axis = ax % x.ndim
    p = T.softmax(Tensor(x), axis=axis).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 16)),
                  elements=st.floats(-100, 100)))
def test_layer_norm_standardizes(x):
    x = x + np.linspace(0, 1e-2, x.shape[1])  # avoid exactly constant rows
    y = T.layer_norm(Tensor(x), None, None, eps=1e-12).data
    assert np.abs(y.mean(axis=1)).max() < 1e-5
    var = y.var(axis=1)
    np.testing.assert_allclose(var, 1.0, atol=1e-4)


# -- conv2d ----------------------------------------------------------------

def test_conv_identity_kernel():
    rng = Stream(2)
    x = rng.standard_normal((1, 1, 5, 5))
    out = T.conv2d(f64(x, False), f64(np.ones((1, 1, 1, 1)), False)).data
    np.testing.assert_array_equal(out, x)


def test_conv_matches_direct_loops():
    rng = Stream(4)
    x = rng.standard_normal((1, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    ref = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                for c in range(2):
                    for u in range(3):
                        for v in range(3):
                            ref[0, o, i, j] += x[0, c, i + u, j + v] * k[o, c, u, v]
    out = T.conv2d(f64(x, False), f64(k, False)).data
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_conv_stride_shape():
    out = T.conv2d(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))),
                   stride=2, padding=1)
    assert out.shape == (1, 1, 4, 4)


def test_conv_kernel_too_large():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=1)


# -- non-finite policy ------------------------------------------------------

@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_names_operation():
    with pytest.raises(NonFiniteError) as info:
        T.log(Tensor(np.array([-1.0, 1.0])))
    assert info.value.op == "log"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exp_overflow_raises():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1e4], np.float32)))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=2, max_side=5),
                  elements=st.floats(-1e3, 1e3, width=32)))
def test_finite_inputs_stay_finite(x):
    t = Tensor(x)
    for y in (T.gelu(t), T.tanh(t), T.softmax(t), T.silu(t), T.l2_normalize(t)):
        assert np.isfinite(y.data).all()


# -- parameters ---------------------------------------------------------

def test_parameter_grad_matches_shape():
    p = Parameter(np.zeros((3, 2)), name="w")
    assert p.grad.shape == p.shape and p.m.shape == p.shape and p.v.shape == p.shape


def test_default_dtype_context():
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# -- optimizer ------------------------------------------------------------

def test_adamw_zero_grad_fixed_point():
    p = Parameter(np.array([0.3, -1.2]))
    before = p.data.copy()
    cfg = OptimizerConfig(base_lr=1e-3, weight_decay=0.0)
    for i in range(3):
        adamw_step([p], cfg, i)
    np.testing.assert_array_equal(p.data, before)


def test_adamw_single_step():
    with T.default_dtype(np.float64):
        p = Parameter(np.array([1.0]))
    p.grad[:] = 1.0
    cfg = OptimizerConfig(base_lr=1e-3, weight_decay=0.0)
    adamw_step([p], cfg, 0, lr=1e-3)
    # bias-corrected m = v = 1 after one step
    np.testing.assert_allclose(p.data, [1.0 - 1e-3 / (1.0 + 1e-8)], rtol=0, atol=1e-12)


def test_adamw_decay_skips_flagged_params():
    a = Parameter(np.array([1.0]))
    b = Parameter(np.array([1.0]), decay=False)
    cfg = OptimizerConfig(base_lr=0.1, weight_decay=0.5)
    adamw_step([a, b], cfg, 0, lr=0.1)
    assert a.data[0] < 1.0 and b.data[0] == 1.0


def test_warmup_first_step():
    cfg = OptimizerConfig(base_lr=1e-3, warmup_epochs=5)
    sch = Schedule(cfg, steps_per_epoch=10, total_steps=100)
    assert sch.lr(0) == pytest.approx(1e-3 / 50)
    assert sch.lr(49) == pytest.approx(1e-3)
    assert sch.lr(100) == pytest.approx(cfg.min_lr)


@pytest.mark.parametrize("kw", [dict(min_lr=1e-2, base_lr=1e-3), dict(betas=(1.0, 0.9)),
                                dict(weight_decay=-1.0), dict(schedule="step")])
def test_optimizer_config_validation(kw):
    with pytest.raises(ValueError):
        OptimizerConfig(**kw)


def _pair(t, s):
    with T.default_dtype(np.float64):
        return [Parameter(np.array(t, np.float64), name="w")], \
            [Parameter(np.array(s, np.float64), name="w")]


def test_ema_momentum_one_and_zero():
    t, s = _pair([1.0, 2.0], [5.0, 6.0])
    ema_update(t, s, 1.0)
    np.testing.assert_array_equal(t[0].data, [1.0, 2.0])
    ema_update(t, s, 0.0)
    np.testing.assert_array_equal(t[0].data, [5.0, 6.0])


def test_ema_formula():
    t, s = _pair([1.0], [0.0])
    ema_update(t, s, 0.9)
    assert t[0].data[0] == 0.9


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 1))
def test_ema_is_affine_bitwise(tv, sv, m):
    t, s = _pair([tv], [sv])
    ema_update(t, s, m)
    assert t[0].data[0] == m * tv + (1.0 - m) * sv


def test_ema_name_mismatch():
    t = [Parameter(np.zeros(2), name="a")]
    s = [Parameter(np.zeros(2), name="b")]
    with pytest.raises(ValueError):
        ema_update(t, s, 0.5)


def test_cosine_momentum_endpoints():
    assert cosine_momentum(0, 100) == pytest.approx(0.996)
    assert cosine_momentum(99, 100) == pytest.approx(1.0)


# -- rng ---------------------------------------------------------------------

def test_stream_split_is_path_determined():
    a = Stream(7).split("x").standard_normal(4)
    root = Stream(7)
    root.split("y").standard_normal(100)
    b = root.split("x").standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, Stream(8).split("x").standard_normal(4))
