"""Backend parity: the numba kernels must match the numpy reference."""

import numpy as np
import pytest

from tokenhalt.kernels import BACKEND, numpy_backend

numba_backend = pytest.importorskip("tokenhalt.kernels.numba_backend")

R = np.random.Generator(np.random.PCG64(11))


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_elementwise_parity(dtype, tol):
    x = R.normal(scale=3, size=(64,)).astype(dtype)
    g = R.normal(size=(64,)).astype(dtype)
    for name in ("sigmoid_fwd", "gelu_fwd"):
        a = getattr(numba_backend, name)(x)
        b = getattr(numpy_backend, name)(x)
        np.testing.assert_allclose(a, b, atol=tol, err_msg=name)
    y = numpy_backend.sigmoid_fwd(x)
    np.testing.assert_allclose(numba_backend.sigmoid_bwd(y, g),
                               numpy_backend.sigmoid_bwd(y, g), atol=tol)
    np.testing.assert_allclose(numba_backend.gelu_bwd(x, g),
                               numpy_backend.gelu_bwd(x, g), atol=tol)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-14)])
def test_softmax_parity(dtype, tol):
    x = R.normal(scale=4, size=(10, 17)).astype(dtype)
    g = R.normal(size=(10, 17)).astype(dtype)
    mask = R.uniform(size=(10, 17)) > 0.3
    mask[:, 0] = True
    a = numba_backend.softmax_fwd(x)
    b = numpy_backend.softmax_fwd(x)
    np.testing.assert_allclose(a, b, atol=tol)
    am = numba_backend.softmax_masked_fwd(x, mask)
    bm = numpy_backend.softmax_masked_fwd(x, mask)
    np.testing.assert_allclose(am, bm, atol=tol)
    assert (am[~mask] == 0).all()
    np.testing.assert_allclose(numba_backend.softmax_bwd(b, g),
                               numpy_backend.softmax_bwd(b, g), atol=tol)


def test_softmax_fully_masked_row_is_zero():
    x = np.ones((2, 4), dtype=np.float32)
    mask = np.zeros((2, 4), dtype=bool)
    mask[0] = True
    for impl in (numba_backend, numpy_backend):
        y = impl.softmax_masked_fwd(x, mask)
        np.testing.assert_allclose(y[1], 0.0)
        np.testing.assert_allclose(y[0].sum(), 1.0, atol=1e-6)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-4), (np.float64, 1e-12)])
def test_layernorm_parity(dtype, tol):
    x = R.normal(scale=2, size=(12, 33)).astype(dtype)
    gain = R.normal(size=(33,)).astype(dtype)
    bias = R.normal(size=(33,)).astype(dtype)
    g = R.normal(size=(12, 33)).astype(dtype)
    eps = dtype(1e-5)
    ya, mua, rsa = numba_backend.layernorm_fwd(x, gain, bias, eps)
    yb, mub, rsb = numpy_backend.layernorm_fwd(x, gain, bias, eps)
    np.testing.assert_allclose(ya, yb, atol=tol)
    outs_a = numba_backend.layernorm_bwd(x, gain, mua, rsa, g)
    outs_b = numpy_backend.layernorm_bwd(x, gain, mub, rsb, g)
    for a, b in zip(outs_a, outs_b):
        np.testing.assert_allclose(a, b, atol=tol * 50)


def test_active_backend_is_valid():
    assert BACKEND in ("numba", "numpy")
