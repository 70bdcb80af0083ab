import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blurmotion.image import (CropOperator, DerivativeFilterBank, ForwardDifference, IdentityFilter,
                              build_pyramid, downsample, flow_overlay, flow_to_color, pyramid_shapes,
                              read_pfm, read_png, resample, to_gradient_domain, to_luma, write_pfm, write_png)


def dense(op_apply, shape):
    """Matrix of a linear map on images of ``shape`` by probing unit vectors."""
    n = shape[0] * shape[1]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(op_apply(e.reshape(shape)).ravel())
    return np.array(cols).T


@pytest.mark.parametrize("axis", [0, 1])
def test_forward_difference_adjoint_and_squares(axis):
    shape = (5, 6)
    f = ForwardDifference(axis)
    D = dense(f.apply, shape)
    assert np.allclose(dense(f.adjoint, shape), D.T)
    assert np.allclose(dense(f.apply_sq, shape), D ** 2)
    assert np.allclose(dense(f.adjoint_sq, shape), (D ** 2).T)


def test_forward_difference_matches_gradient_domain(rng):
    img = rng.normal(size=(7, 9))
    g = to_gradient_domain(img)
    assert np.array_equal(ForwardDifference(1).apply(img), g.dx)
    assert np.array_equal(ForwardDifference(0).apply(img), g.dy)
    assert np.all(g.dx[:, -1] == 0) and np.all(g.dy[-1] == 0)


def test_gradient_domain_needs_single_channel():
    with pytest.raises(ValueError):
        to_gradient_domain(np.zeros((4, 4, 3)))


def test_identity_filter_is_identity(rng):
    x = rng.normal(size=(3, 4))
    f = IdentityFilter()
    assert np.array_equal(f.apply(x), x) and np.array_equal(f.adjoint_sq(x), x)


def test_filter_bank_rejects_nonzero_sum():
    with pytest.raises(ValueError):
        DerivativeFilterBank((IdentityFilter(),))
    assert DerivativeFilterBank().names == ["dx", "dy"]


def test_crop_adjoint(rng):
    c = CropOperator(3, (4, 5))
    x = rng.normal(size=c.latent_shape)
    v = rng.normal(size=(4, 5))
    assert np.isclose(np.sum(c.crop(x) * v), np.sum(x * c.adjoint(v)))
    assert np.array_equal(c.crop(c.pad_replicate(v)), v)
    with pytest.raises(ValueError):
        c.crop(np.zeros((4, 5)))


def test_luma_weights():
    img = np.zeros((2, 2, 3))
    img[..., 1] = 1.0
    assert np.allclose(to_luma(img), 0.587)


def test_pyramid_shapes_for_benchmark_size():
    assert pyramid_shapes((192, 256)) == [(192, 256), (96, 128), (48, 64), (24, 32)]
    assert pyramid_shapes((40, 40)) == [(40, 40)]
    assert pyramid_shapes((64, 64)) == [(64, 64), (32, 32)]


def test_pyramid_levels_and_min_dim(rng):
    p = build_pyramid(rng.uniform(size=(64, 80)))
    assert p.shapes == [(64, 80), (32, 40)]
    with pytest.raises(ValueError):
        build_pyramid(np.zeros((64, 64)), min_dim=8)


@given(st.floats(-3, 3), st.integers(8, 40), st.integers(8, 40))
@settings(max_examples=25)
def test_downsample_preserves_constants(value, h, w):
    out = downsample(np.full((h, w), value))
    assert out.shape == ((h + 1) // 2, (w + 1) // 2)
    assert np.allclose(out, value)


def test_resample_identity(rng):
    img = rng.normal(size=(9, 11))
    assert np.allclose(resample(img, img.shape), img)


def test_flow_color_zero_is_white_and_shape():
    f = np.zeros((4, 5, 2))
    assert np.allclose(flow_to_color(f), 1.0)
    f[0, 0] = (1, 0)
    col = flow_to_color(f)
    assert col.shape == (4, 5, 3) and not np.allclose(col[0, 0], 1.0)
    with pytest.raises(ValueError):
        flow_to_color(np.full((2, 2, 2), np.nan))


def test_flow_overlay_keeps_gray_outside_mask(rng):
    gray = rng.uniform(size=(6, 6))
    field = np.ones((6, 6, 2))
    mask = np.zeros((6, 6), bool)
    mask[2:4, 2:4] = True
    out = flow_overlay(gray, field, mask)
    assert np.allclose(out[0, 0], gray[0, 0])
    assert not np.allclose(out[2, 2], gray[2, 2])


def test_pfm_roundtrip(tmp_path, rng):
    for arr in (rng.normal(size=(5, 7)), rng.normal(size=(5, 7, 3))):
        write_pfm(tmp_path / "a.pfm", arr)
        assert np.allclose(read_pfm(tmp_path / "a.pfm"), arr.astype(np.float32))
    flow = rng.normal(size=(4, 3, 2))
    write_pfm(tmp_path / "f.pfm", flow)
    back = read_pfm(tmp_path / "f.pfm")
    assert np.allclose(back[..., :2], flow.astype(np.float32)) and np.all(back[..., 2] == 0)


def test_png_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(size=(6, 8, 3)) * 255) / 255
    write_png(tmp_path / "x.png", img)
    assert np.allclose(read_png(tmp_path / "x.png"), img)
