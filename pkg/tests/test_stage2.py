import numpy as np
import pytest

from blurmotion.priors import GsmPrior, PottsPrior, gmm_loglik, weighted_loglik
from blurmotion.stage1 import NoiseModel, free_energy, segmentation_unary
from blurmotion.stage2 import (ColorStep, color_cost, init_color_models, initial_stage2_state,
                               run_stage2_level, stage2_problem)

GSM = GsmPrior(np.array([0.6, 0.4]), np.array([0.02, 0.2]))


def two_color_image(rng, shape=(24, 28)):
    img = np.empty(shape + (3,))
    img[:] = [0.2, 0.3, 0.8]
    img[6:18, 8:20] = [0.9, 0.6, 0.1]
    img += rng.normal(0, 0.02, img.shape)
    truth = np.zeros(shape, bool)
    truth[6:18, 8:20] = True
    return img, truth


def test_init_color_models_separate_sides(rng):
    img, truth = two_color_image(rng)
    fg, bg = init_color_models(img, truth.astype(float), J=3, seed=0)
    x = img.reshape(-1, 3)
    lf, lb = gmm_loglik(fg, x), gmm_loglik(bg, x)
    assert np.mean((lf > lb) == truth.ravel()) > 0.99


def test_init_reduces_components_for_flat_side():
    img = np.zeros((10, 10, 3))
    img[:5] = 0.5
    r = np.zeros((10, 10))
    r[:5] = 1
    fg, bg = init_color_models(img, r, J=5)
    assert fg.J == 1 or np.all(np.isclose(fg.mu, 0.5, atol=1e-6) | (fg.pi < 1e-6)[:, None])


def test_init_rejects_size_mismatch():
    with pytest.raises(ValueError):
        init_color_models(np.zeros((4, 4, 3)), np.zeros((5, 4)))


def test_color_cost_sign(rng):
    img, truth = two_color_image(rng)
    fg, bg = init_color_models(img, truth.astype(float), J=2)
    cost = color_cost(img, fg, bg, 0.5)
    assert cost.shape == (2,) + truth.shape
    assert np.all((cost[0] < cost[1])[truth])


def test_color_step_never_lowers_weighted_loglik(rng):
    img, truth = two_color_image(rng)
    r = np.clip(truth + rng.normal(0, 0.2, truth.shape), 0.01, 0.99)
    fg, bg = init_color_models(img, r, J=3)
    prob = stage2_problem(img.mean(axis=2), img, GSM, PottsPrior(1.0, 0.0), NoiseModel(0.02), 4,
                          fg, bg, 0.5)
    state = initial_stage2_state(prob, r)
    step = ColorStep(img, fg, bg, 0.5)
    x = img.reshape(-1, 3)
    before = weighted_loglik(fg, x, r) + weighted_loglik(bg, x, 1 - r)
    F0 = free_energy(prob, state, [2, 0, 0, 0, 0, 0])
    step(prob, state, [2, 0, 0, 0, 0, 0])
    after = weighted_loglik(step.fg, x, r) + weighted_loglik(step.bg, x, 1 - r)
    assert after >= before
    assert free_energy(prob, state, [2, 0, 0, 0, 0, 0]) <= F0 + 1e-9 * abs(F0)


def test_color_term_enters_unary(rng):
    img, truth = two_color_image(rng)
    fg, bg = init_color_models(img, truth.astype(float), J=2)
    a = [2.0, 0, 0, 0, 0, 0]
    with_c = stage2_problem(img.mean(axis=2), img, GSM, PottsPrior(1.0, 0.0), NoiseModel(0.02), 4, fg, bg, 0.5)
    without = stage2_problem(img.mean(axis=2), img, GSM, PottsPrior(1.0, 0.0), NoiseModel(0.02), 4, fg, bg, 0.0)
    st = initial_stage2_state(with_c, truth * 0.5 + 0.25)
    g1 = segmentation_unary(with_c, st, with_c.operator(a))
    g0 = segmentation_unary(without, st, without.operator(a))
    assert np.allclose(g1 - g0, with_c.color_cost[0] - with_c.color_cost[1])


def test_stage2_level_descends_and_recovers_mask(rng):
    img, truth = two_color_image(rng, (32, 36))
    luma = img.mean(axis=2)
    r0 = np.clip(truth * 0.6 + 0.2, 0.01, 0.99)
    fg, bg = init_color_models(img, r0, J=2)
    prob = stage2_problem(luma, img, GSM, PottsPrior(0.5, 0.0), NoiseModel(0.02), 4, fg, bg, 2.0)
    res = run_stage2_level(prob, initial_stage2_state(prob, r0), [1.0, 0, 0, 0, 0, 0], img, fg, bg, 2.0, iters=4)
    F = np.array([t.energy for t in res.trace])
    assert np.all(np.diff(F) <= 1e-6 * np.abs(F[:-1]))
    assert res.latent.shape == luma.shape
    assert np.mean((res.state.r >= 0.5) == truth) > 0.9
