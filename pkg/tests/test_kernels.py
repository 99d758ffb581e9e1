"""The numba-compiled kernels must agree with their numpy fallbacks."""

import numpy as np
import pytest

from gumbel_nerf import kernels

from helpers import numeric_gradient

pytestmark = pytest.mark.skipif(
    not kernels.HAS_NUMBA, reason="numba disabled; only one path to compare"
)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_fourier_features_paths_agree(dtype):
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, (40, 3)).astype(dtype)
    a = kernels.fourier_features_numpy(x, 6)
    b = kernels.fourier_features_jit(x, 6)
    assert a.dtype == b.dtype == dtype
    np.testing.assert_allclose(a, b, atol=1e-6 if dtype == np.float32 else 1e-14)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("background", [0.0, 1.0])
def test_composite_paths_agree(dtype, background):
    rng = np.random.default_rng(1)
    sigma = rng.uniform(0, 5, (16, 24)).astype(dtype)
    rgb = rng.uniform(0, 1, (16, 24, 3)).astype(dtype)
    delta = np.full((16, 24), 0.05, dtype=dtype)
    delta[:, -1] = 1e10
    tol = 1e-5 if dtype == np.float32 else 1e-12
    pa, wa, ta = kernels.composite_forward_numpy(sigma, rgb, delta, background)
    pb, wb, tb = kernels.composite_forward_jit(sigma, rgb, delta, background)
    np.testing.assert_allclose(pa, pb, atol=tol)
    np.testing.assert_allclose(wa, wb, atol=tol)
    np.testing.assert_allclose(ta, tb, atol=tol)

    dpix = rng.standard_normal((16, 3)).astype(dtype)
    dsa, dca = kernels.composite_backward_numpy(
        sigma, rgb, delta, ta, wa, background, dpix
    )
    dsb, dcb = kernels.composite_backward_jit(
        sigma, rgb, delta, tb, wb, background, dpix
    )
    np.testing.assert_allclose(dsa, dsb, atol=tol * 10)
    np.testing.assert_allclose(dca, dcb, atol=tol)


@pytest.mark.parametrize("background", [0.0, 1.0])
def test_composite_backward_matches_finite_differences(background):
    rng = np.random.default_rng(2)
    sigma = rng.uniform(0.1, 4.0, (3, 8))
    rgb = rng.uniform(0, 1, (3, 8, 3))
    delta = rng.uniform(0.01, 0.1, (3, 8))
    dpix = rng.standard_normal((3, 3))

    def loss():
        p, _, _ = kernels.composite_forward_numpy(sigma, rgb, delta, background)
        return float((p * dpix).sum())

    _, weights, trans = kernels.composite_forward_numpy(sigma, rgb, delta,
                                                        background)
    dsigma, drgb = kernels.composite_backward_numpy(
        sigma, rgb, delta, trans, weights, background, dpix
    )
    fd_sigma = numeric_gradient(loss, sigma, h=1e-6)
    fd_rgb = numeric_gradient(loss, rgb, h=1e-6)
    np.testing.assert_allclose(dsigma, fd_sigma, atol=1e-7)
    np.testing.assert_allclose(drgb, fd_rgb, atol=1e-7)


def test_composite_sentinel_gradient_is_finite():
    # the huge final spacing must not produce NaN/inf gradients
    sigma = np.array([[0.5, 1e-6]])
    rgb = np.full((1, 2, 3), 0.5)
    delta = np.array([[0.1, 1e10]])
    pix, weights, trans = kernels.composite_forward_numpy(sigma, rgb, delta, 1.0)
    dsigma, drgb = kernels.composite_backward_numpy(
        sigma, rgb, delta, trans, weights, 1.0, np.ones((1, 3))
    )
    assert np.isfinite(pix).all()
    assert np.isfinite(dsigma).all() and np.isfinite(drgb).all()


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adamw_paths_agree(dtype):
    rng = np.random.default_rng(3)
    args = dict(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4,
                inv_bc1=1.0 / (1 - 0.9 ** 3), inv_bc2=1.0 / (1 - 0.999 ** 3))
    p1 = rng.standard_normal(100).astype(dtype)
    g = rng.standard_normal(100).astype(dtype)
    m1 = rng.uniform(0, 0.1, 100).astype(dtype)
    v1 = rng.uniform(0, 0.1, 100).astype(dtype)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    kernels.adamw_update_numpy(p1, g, m1, v1, **args)
    kernels.adamw_update_jit(p2, g, m2, v2, **args)
    tol = 1e-6 if dtype == np.float32 else 1e-14
    np.testing.assert_allclose(p1, p2, atol=tol)
    np.testing.assert_allclose(m1, m2, atol=tol)
    np.testing.assert_allclose(v1, v2, atol=tol)
