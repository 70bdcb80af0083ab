"""Variational updates checked against Monte Carlo, dense linear algebra and finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from blurmotion.blur import required_pad
from blurmotion.image import ForwardDifference, IdentityFilter
from blurmotion.priors import GsmPrior, PottsPrior
from blurmotion.stage1 import (DegenerateLinearization, NoiseModel, PosteriorState, Problem, free_energy,
                               free_energy_terms, image_system, initial_state, motion_system, run_level,
                               segmentation_unary, update_image, update_indicators, update_motion,
                               update_segmentation)

GSM = GsmPrior(np.array([0.5, 0.3, 0.2]), np.array([0.02, 0.08, 0.3]))


def random_problem(rng, shape=(4, 4), channels=1, filters=(IdentityFilter(),), a=None, color=False,
                   sigma_n=None, extra_pad=0):
    if a is None:
        a = np.array([rng.uniform(0.3, 1.5), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                      rng.uniform(-1, 1), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)])
    pad = required_pad(a, shape) + extra_pad
    y = rng.normal(0, 0.1, (channels,) + shape)
    cost = rng.uniform(0, 1, (2,) + shape) if color else None
    sn = sigma_n if sigma_n is not None else rng.uniform(0.05, 0.2)
    prob = Problem(y, GSM, PottsPrior(rng.uniform(0, 1), rng.uniform(0, 0.5)), NoiseModel(sn), pad,
                   filters=filters, color_cost=cost)
    return prob, a


def random_state(rng, prob):
    C = prob.channels
    L = prob.latent_shape
    mu = rng.normal(0, 0.1, (C,) + L)
    sigma = rng.uniform(0.001, 0.02, (C,) + L)
    r = rng.uniform(0.05, 0.95, prob.obs_shape)
    v = rng.dirichlet(np.ones(GSM.J), size=(C, len(prob.filters)) + L)
    v = np.moveaxis(v, -1, 2)
    return PosteriorState(mu, sigma, r, v)


def dense_matrix(fn, n_in):
    cols = []
    for i in range(n_in):
        e = np.zeros(n_in)
        e[i] = 1.0
        cols.append(fn(e).ravel())
    return np.array(cols).T


def monte_carlo_free_energy(prob, state, a, n=100_000, batch=10_000, seed=0):
    """Sample q and average ``log q - log p(y, x, h, z)`` with Potts unnormalized."""
    rng = np.random.default_rng(seed)
    op = prob.operator(a)
    L = prob.latent_shape
    nl = L[0] * L[1]
    K = dense_matrix(lambda e: op.apply(e.reshape(L)), nl)
    Cr = dense_matrix(lambda e: prob.crop.crop(e.reshape(L)), nl)
    Ds = [dense_matrix(lambda e, f=f: f.apply(e.reshape(L)), nl) for f in prob.filters]
    s2n = prob.noise.sigma_n ** 2
    logpi = np.log(GSM.pi)
    r = state.r.ravel()
    vals = []
    for start in range(0, n, batch):
        m = min(batch, n - start)
        h = (rng.random((m, r.size)) < r).astype(float)
        tot = np.zeros(m)
        # log q(h) + segmentation prior + color cost
        tot += np.sum(h * np.log(r) + (1 - h) * np.log(1 - r), axis=1)
        tot += np.array([prob.potts.energy(hh.reshape(prob.obs_shape)) for hh in h])
        if prob.color_cost is not None:
            tot += h @ prob.color_cost[0].ravel() + (1 - h) @ prob.color_cost[1].ravel()
        for ch in range(prob.channels):
            mu = state.mu[ch].ravel()
            sd = np.sqrt(state.sigma[ch].ravel())
            x = mu + sd * rng.normal(size=(m, nl))
            tot += np.sum(-0.5 * np.log(2 * np.pi * sd ** 2) - 0.5 * ((x - mu) / sd) ** 2, axis=1)
            y = prob.y[ch].ravel()
            rb = (x @ K.T - y) ** 2
            rs = (x @ Cr.T - y) ** 2
            tot += np.sum(np.where(h > 0, rb, rs), axis=1) / (2 * s2n) + 0.5 * y.size * np.log(2 * np.pi * s2n)
            for g, D in enumerate(Ds):
                f = x @ D.T
                v = state.v[ch, g].reshape(GSM.J, -1).T  # (nl, J)
                u = rng.random((m, nl, 1))
                z = np.minimum((u > np.cumsum(v, axis=1)[None]).sum(axis=2), GSM.J - 1)
                sz = GSM.sigma[z]
                logp = logpi[z] - np.log(sz) - 0.5 * np.log(2 * np.pi) - f ** 2 / (2 * sz ** 2)
                logq = np.log(np.take_along_axis(np.broadcast_to(v, (m,) + v.shape), z[..., None], 2)[..., 0])
                tot += np.sum(logq - logp, axis=1)
        vals.append(tot)
    vals = np.concatenate(vals)
    return vals.mean(), vals.std(ddof=1) / np.sqrt(vals.size)


def mc_case(seed):
    """Random 4x4 problem: plain, two channels with color costs, or difference filters."""
    rng = np.random.default_rng(seed)
    kind = seed % 3
    if kind == 0:
        prob, a = random_problem(rng)
    elif kind == 1:
        prob, a = random_problem(rng, channels=2, color=True)
    else:
        prob, a = random_problem(rng, filters=(ForwardDifference(1), ForwardDifference(0)))
    return prob, random_state(rng, prob), a


@pytest.mark.parametrize("seed", range(5))
def test_free_energy_matches_monte_carlo(seed):
    prob, state, a = mc_case(seed)
    F = free_energy(prob, state, a)
    mc, se = monte_carlo_free_energy(prob, state, a, n=20_000, seed=seed)
    assert abs(F - mc) <= 3 * se, (F, mc, se)


def test_image_update_matches_dense_solve(rng):
    prob, a = random_problem(rng, shape=(8, 8), filters=(ForwardDifference(1), ForwardDifference(0)))
    prob.cg_tol = 1e-13
    prob.cg_maxiter = 5000
    state = random_state(rng, prob)
    op = prob.operator(a)
    matvec, rhs, diag = image_system(prob, state, op, 0)
    L = prob.latent_shape
    A = dense_matrix(lambda e: matvec(e.reshape(L)), L[0] * L[1])
    assert np.allclose(A, A.T, atol=1e-9)
    mu = np.linalg.solve(A, rhs.ravel())
    new = update_image(prob, state, a)
    assert np.max(np.abs(new.mu[0].ravel() - mu)) <= 1e-5
    # variances are exactly the elementwise inverse of the system diagonal
    assert np.array_equal(new.sigma[0], 1.0 / diag)
    assert np.allclose(diag.ravel(), np.diag(A), rtol=1e-12)


def test_image_update_minimizes_free_energy(rng):
    prob, a = random_problem(rng, shape=(6, 6))
    prob.cg_tol = 1e-12
    state = update_image(prob, random_state(rng, prob), a)
    F0 = free_energy(prob, state, a)
    for _ in range(10):
        d = rng.normal(0, 1e-3, state.mu.shape)
        assert free_energy(prob, state.replace(mu=state.mu + d), a) >= F0 - 1e-9
        s = state.sigma * np.exp(rng.normal(0, 0.05, state.sigma.shape))
        assert free_energy(prob, state.replace(sigma=s), a) >= F0 - 1e-9


def test_indicator_update_minimizes_free_energy(rng):
    prob, a = random_problem(rng)
    state = update_indicators(prob, random_state(rng, prob))
    F0 = free_energy(prob, state, a)
    for _ in range(10):
        v = state.v * np.exp(rng.normal(0, 0.1, state.v.shape))
        v /= v.sum(axis=2, keepdims=True)
        assert free_energy(prob, state.replace(v=v), a) >= F0 - 1e-10


def test_segmentation_unary_is_free_energy_gradient(rng):
    prob, a = random_problem(rng, color=True, channels=2)
    state = random_state(rng, prob)
    g = segmentation_unary(prob, state, prob.operator(a))
    # F is multilinear in r apart from the entropy and the Potts pair terms
    base = free_energy_terms(prob, state, a)
    r = state.r
    for idx in [(0, 0), (2, 3), (1, 1)]:
        h = 1e-6
        rp, rm = r.copy(), r.copy()
        rp[idx] += h
        rm[idx] -= h
        Fp = free_energy(prob, state.replace(r=rp), a)
        Fm = free_energy(prob, state.replace(r=rm), a)
        fd = (Fp - Fm) / (2 * h)
        ent = np.log(r[idx] / (1 - r[idx]))
        pair = prob.potts.lam0 - prob.potts.message(r)[idx]
        assert np.isclose(fd, g[idx] - prob.potts.lam0 + pair + ent, rtol=1e-5, atol=1e-5)
    assert np.isfinite(base["total"])


def test_segmentation_update_fixed_point_and_descent(rng):
    prob, a = random_problem(rng, shape=(5, 5))
    state = random_state(rng, prob)
    F = free_energy(prob, state, a)
    for _ in range(30):
        state = update_segmentation(prob, state, a)
        F1 = free_energy(prob, state, a)
        assert F1 <= F + 1e-9 * abs(F)
        F = F1
    g = segmentation_unary(prob, state, prob.operator(a))
    target = expit(-g + prob.potts.message(state.r))
    assert np.allclose(state.r, np.clip(target, 1e-6, 1 - 1e-6), atol=1e-3)


def test_motion_gradient_matches_finite_differences(rng):
    prob, a = random_problem(rng, shape=(6, 6), extra_pad=2)
    state = random_state(rng, prob)
    op = prob.operator(a, with_grad=True)
    _, b0 = motion_system(prob, state, op)
    grad = b0 / prob.noise.sigma_n ** 2
    T = op.T
    prob.time_steps = T
    for p in range(6):
        h = 1e-6
        e = np.zeros(6)
        e[p] = h
        fd = (free_energy(prob, state, a + e) - free_energy(prob, state, a - e)) / (2 * h)
        assert np.isclose(grad[p], fd, rtol=1e-4, atol=1e-6 * max(1.0, np.abs(grad).max()))


def test_motion_step_descends(rng):
    prob, a = random_problem(rng, shape=(6, 6), extra_pad=3)
    state = random_state(rng, prob)
    F0 = free_energy(prob, state, a)
    step = update_motion(prob, state, a)
    assert step.energy <= F0
    if step.accepted:
        assert np.isclose(free_energy(prob, state, step.a), step.energy)


def test_zero_motion_is_degenerate(rng):
    prob, _ = random_problem(rng, shape=(6, 6))
    with pytest.raises(DegenerateLinearization):
        update_motion(prob, random_state(rng, prob), np.zeros(6))


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=20)
def test_free_energy_sign_symmetric(seed):
    rng = np.random.default_rng(seed)
    prob, a = random_problem(rng, shape=(6, 7), channels=int(rng.integers(1, 3)), color=bool(seed % 2))
    state = random_state(rng, prob)
    F1 = free_energy(prob, state, a)
    F2 = free_energy(prob, state, -a)
    assert abs(F1 - F2) <= 1e-10 * max(1.0, abs(F1))


def test_run_level_monotone_trace(rng):
    shape = (24, 24)
    prob, a = random_problem(rng, shape=shape, channels=2, a=np.array([2.0, 0, 0, 0.5, 0, 0]), sigma_n=0.02,
                             extra_pad=2)
    yy = np.cumsum(rng.normal(0, 0.05, (2,) + shape), axis=2)
    prob.y = np.diff(np.concatenate([yy, yy[:, :, -1:]], axis=2), axis=2)
    state = initial_state(prob)
    res = run_level(prob, state, a, iters=6)
    F = np.array([t.energy for t in res.trace])
    assert np.all(np.diff(F) <= 1e-6 * np.abs(F[:-1]))
    res.state.validate()


def test_initial_state(rng):
    prob, _ = random_problem(rng, shape=(5, 6))
    st0 = initial_state(prob)
    assert np.all(st0.r == 0.5)
    assert np.allclose(st0.v, 1.0 / GSM.J)
    assert np.allclose(prob.crop.crop(st0.mu), prob.y)
    assert np.all(st0.sigma == prob.noise.sigma_n ** 2)
