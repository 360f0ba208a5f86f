import numpy as np
import pytest

from tcae import _kernels
from tcae._kernels import numpy_impl
from tcae.rng import Stream

nb = pytest.importorskip("tcae._kernels.numba_impl")


def arr(shape, seed=0, dtype=np.float64):
    return Stream(seed).standard_normal(shape).astype(dtype)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_elementwise_and_row_kernels_agree(dtype, tol):
    x, g = arr((7, 13), 0, dtype), arr((7, 13), 1, dtype)
    np.testing.assert_allclose(nb.gelu_fwd(x), numpy_impl.gelu_fwd(x), atol=tol)
    np.testing.assert_allclose(nb.gelu_bwd(x, g), numpy_impl.gelu_bwd(x, g), atol=tol)
    for a, b in zip(nb.layernorm_fwd(x, 1e-6), numpy_impl.layernorm_fwd(x, 1e-6)):
        np.testing.assert_allclose(a, b, atol=tol)
    xhat, rstd = numpy_impl.layernorm_fwd(x, 1e-6)
    np.testing.assert_allclose(nb.layernorm_bwd(g, xhat, rstd),
                               numpy_impl.layernorm_bwd(g, xhat, rstd), atol=tol)
    y = numpy_impl.softmax_fwd(x.copy())
    np.testing.assert_allclose(nb.softmax_fwd(x.copy()), y, atol=tol)
    np.testing.assert_allclose(nb.softmax_bwd(y, g), numpy_impl.softmax_bwd(y, g), atol=tol)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (4, 2, 1), (2, 2, 0)])
def test_im2col_col2im_agree(k, stride, pad):
    x = arr((2, 3, 8, 8))
    a = nb.im2col(x, k, stride, pad)
    np.testing.assert_array_equal(a, numpy_impl.im2col(x, k, stride, pad))
    np.testing.assert_allclose(nb.col2im(a, x.shape, k, stride, pad),
                               numpy_impl.col2im(a, x.shape, k, stride, pad), atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    x = arr((1, 2, 6, 6), 3)
    c = arr(numpy_impl.im2col(x, 3, 2, 1).shape, 4)
    lhs = (numpy_impl.im2col(x, 3, 2, 1) * c).sum()
    rhs = (x * numpy_impl.col2im(c, x.shape, 3, 2, 1)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_bilinear_agrees():
    img = arr((3, 9, 11), 5, np.float32)
    a = nb.bilinear_sample(img, 1.3, 0.7, 6.2, 8.9, 5, 7)
    b = numpy_impl.bilinear_sample(img, 1.3, 0.7, 6.2, 8.9, 5, 7)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_backend_selection_reported():
    assert _kernels.BACKEND_NAME in ("numba", "numpy")
    # GELU always runs through numpy (see the benchmark)
    assert _kernels.gelu_fwd is numpy_impl.gelu_fwd
