"""Blur model: kernels, derivative filters and the sparse operator against dense oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blurmotion.blur import (BlurOperator, MIN_TIME_STEPS, as_params, build_kernel, build_kernel_grad,
                             max_displacement, motion_field, psf, psf_grad, required_pad, time_steps)

SHAPE = (12, 14)


def random_a(rng, scale=3.0, lin=0.15):
    return np.array([rng.uniform(-scale, scale), rng.uniform(-lin, lin), rng.uniform(-lin, lin),
                     rng.uniform(-scale, scale), rng.uniform(-lin, lin), rng.uniform(-lin, lin)])


def dense_operator(a, shape, pad, c=1.5, T=None):
    """Assemble K row by row from per-pixel kernels."""
    h, w = shape
    hl, wl = h + 2 * pad, w + 2 * pad
    K = np.zeros((h * w, hl * wl))
    for y in range(h):
        for x in range(w):
            k = build_kernel(a, (y, x), shape, c, T)
            ry, rx = k.radius
            for ey in range(-ry, ry + 1):
                for ex in range(-rx, rx + 1):
                    wgt = k.weights[ey + ry, ex + rx]
                    if wgt:
                        K[y * w + x, (y + pad + ey) * wl + (x + pad + ex)] += wgt
    return K


def test_motion_field_layout():
    a = [1.0, 0.1, 0.2, -2.0, 0.3, 0.4]
    f = motion_field(a, (3, 5))
    py, px = -1.0, -2.0  # pixel (0, 0)
    assert np.allclose(f[0, 0], [1 + 0.1 * py + 0.2 * px, -2 + 0.3 * py + 0.4 * px])
    assert np.allclose(f[1, 2], [1.0, -2.0])


def test_as_params_rejects_bad_input():
    with pytest.raises(ValueError):
        as_params([1, 2, 3])
    with pytest.raises(ValueError):
        as_params([np.nan, 0, 0, 0, 0, 0])


def test_time_steps_even_with_floor():
    assert time_steps(np.zeros(6), SHAPE) == MIN_TIME_STEPS
    a = [15.2, 0, 0, 0, 0, 0]
    T = time_steps(a, SHAPE)
    assert T % 2 == 0 and T >= 2 * np.ceil(15.2)


def test_psf_gradient_matches_finite_differences(rng):
    for _ in range(50):
        xi = rng.uniform(-1.5, 1.5, 2)
        mu = rng.uniform(-1.5, 1.5, 2)
        g = psf_grad(xi, mu)
        h = 1e-6
        fd = np.array([(psf(xi, mu + h * e) - psf(xi, mu - h * e)) / (2 * h) for e in np.eye(2)])
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_zero_motion_kernel_is_isotropic_bump():
    k = build_kernel(np.zeros(6), (5, 5), SHAPE).weights
    assert np.isclose(k.sum(), 1.0)
    assert np.allclose(k, k.T)
    assert np.allclose(k, k[::-1, ::-1])
    assert k[k.shape[0] // 2, k.shape[1] // 2] == k.max()


@given(st.floats(-6, 6), st.floats(-6, 6), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2),
       st.integers(0, SHAPE[0] - 1), st.integers(0, SHAPE[1] - 1), st.floats(1.0, 2.0))
@settings(max_examples=60)
def test_kernel_normalized_and_point_symmetric(a1, a4, a2, a6, y, x, c):
    a = [a1, a2, 0.0, a4, 0.0, a6]
    k = build_kernel(a, (y, x), SHAPE, c).weights
    assert abs(k.sum() - 1.0) <= 1e-9
    assert np.max(np.abs(k - k[::-1, ::-1])) <= 1e-9


def test_translation_kernels_identical_everywhere():
    a = [4.3, 0, 0, -1.7, 0, 0]
    k0 = build_kernel(a, (0, 0), SHAPE).weights
    for pix in [(3, 7), (11, 13), (6, 0)]:
        assert np.array_equal(build_kernel(a, pix, SHAPE).weights, k0)


def test_kernel_derivatives_match_central_differences(rng):
    worst = 0.0
    for _ in range(100):
        a = random_a(rng)
        pix = (int(rng.integers(SHAPE[0])), int(rng.integers(SHAPE[1])))
        c = rng.uniform(1.0, 2.0)
        T = int(rng.choice([8, 12, 16]))
        g = build_kernel_grad(a, pix, SHAPE, c, T)
        h = 1e-6
        for p in range(6):
            e = np.zeros(6)
            e[p] = h
            kp = build_kernel(a + e, pix, SHAPE, c, T).weights
            km = build_kernel(a - e, pix, SHAPE, c, T).weights
            if kp.shape != g.shape[1:] or km.shape != g.shape[1:]:
                continue  # window size changed under the perturbation
            fd = (kp - km) / (2 * h)
            scale = max(np.abs(fd).max(), np.abs(g[p]).max(), 1e-8)
            worst = max(worst, np.abs(fd - g[p]).max() / scale)
    assert worst < 1e-3


def test_operator_matches_dense_assembly(rng):
    a = random_a(rng, 2.5, 0.1)
    pad = required_pad(a, SHAPE)
    op = BlurOperator(a, SHAPE, pad)
    K = dense_operator(a, SHAPE, pad, T=op.T)
    x = rng.normal(size=op.latent_shape)
    v = rng.normal(size=SHAPE)
    assert np.allclose(op.apply(x).ravel(), K @ x.ravel(), atol=1e-12)
    assert np.allclose(op.apply_transpose(v).ravel(), K.T @ v.ravel(), atol=1e-12)
    s = rng.uniform(0, 1, op.latent_shape)
    assert np.allclose(op.apply_squared(s).ravel(), (K ** 2) @ s.ravel(), atol=1e-12)
    assert np.allclose(op.apply_squared_transpose(v).ravel(), (K ** 2).T @ v.ravel(), atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=20)
def test_operator_adjointness(seed):
    rng = np.random.default_rng(seed)
    a = random_a(rng)
    op = BlurOperator(a, SHAPE, required_pad(a, SHAPE) + 1)
    x = rng.normal(size=op.latent_shape)
    v = rng.normal(size=SHAPE)
    lhs = np.sum(op.apply(x) * v)
    rhs = np.sum(x * op.apply_transpose(v))
    assert np.isclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_row_sums_are_one(rng):
    a = random_a(rng)
    op = BlurOperator(a, SHAPE, required_pad(a, SHAPE))
    assert np.allclose(op.apply(np.ones(op.latent_shape)), 1.0, atol=1e-12)


def test_jacobian_matches_operator_finite_differences(rng):
    a = random_a(rng, 2.0, 0.08)
    pad = required_pad(a, SHAPE) + 2
    op = BlurOperator(a, SHAPE, pad, with_grad=True)
    x = rng.normal(size=op.latent_shape)
    jac = op.jacobian_apply(x).reshape(6, *SHAPE)
    h = 1e-6
    for p in range(6):
        e = np.zeros(6)
        e[p] = h
        plus = BlurOperator(a + e, SHAPE, pad, T=op.T).apply(x)
        minus = BlurOperator(a - e, SHAPE, pad, T=op.T).apply(x)
        fd = (plus - minus) / (2 * h)
        assert np.allclose(jac[p], fd, rtol=1e-4, atol=1e-6 * np.abs(fd).max() + 1e-9)


def test_kernel_at_matches_build_kernel(rng):
    a = random_a(rng)
    op = BlurOperator(a, SHAPE, required_pad(a, SHAPE))
    k1 = op.kernel_at((4, 9)).weights
    k2 = build_kernel(a, (4, 9), SHAPE, T=op.T).weights
    assert np.allclose(k1, k2, atol=1e-14)


def test_pad_too_small_rejected():
    a = [10.0, 0, 0, 0, 0, 0]
    with pytest.raises(ValueError):
        BlurOperator(a, SHAPE, pad=2)


def test_max_displacement_corner():
    a = [0, 0.1, 0, 0, 0, 0]
    # largest |py| is (H-1)/2
    assert np.isclose(max_displacement(a, SHAPE), 0.1 * (SHAPE[0] - 1) / 2)
