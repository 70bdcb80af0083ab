"""Image-space refinement of the segmentation with foreground/background color models.

The motion is frozen. The latent image is the luma intensity with a GSM
prior on its forward differences, and the segmentation energy gains the
per-pixel cost ``lam_c * (-log GMM(y | fg), -log GMM(y | bg))``. After each
sweep both color mixtures take one EM step weighted by ``r`` and ``1 - r``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .image import ForwardDifference
from .priors import ColorGmm, GsmPrior, PottsPrior, _floor_cov, gmm_loglik, weighted_em_step, \
    weighted_loglik
from .stage1 import NoiseModel, PosteriorState, Problem, R_EPS, initial_state, run_level, \
    segmentation_unary

log = logging.getLogger(__name__)

MIN_FOREGROUND = 10.0


def _kmeanspp(x, w, J, rng):
    """Weighted k-means++ seeding; returns indices of the chosen pixels."""
    p = w / w.sum()
    idx = [int(rng.choice(x.shape[0], p=p))]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, J):
        score = w * d2
        tot = score.sum()
        if tot <= 0:
            break
        nxt = int(rng.choice(x.shape[0], p=score / tot))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return idx


def _init_side(x, w, J, rng):
    if w.sum() < 1e-8:
        w = np.ones_like(w)
    distinct = np.unique(np.round(x[w > 0] * 255).astype(np.int64), axis=0).shape[0]
    J = max(1, min(J, distinct))
    seeds = x[_kmeanspp(x, w, J, rng)]
    J = seeds.shape[0]
    label = np.argmin(((x[:, None, :] - seeds[None]) ** 2).sum(axis=2), axis=1)
    pooled_m = (w[:, None] * x).sum(0) / w.sum()
    pooled = _floor_cov(((w[:, None] * (x - pooled_m)).T @ (x - pooled_m)) / w.sum())
    pi = np.empty(J)
    mu = np.empty((J, x.shape[1]))
    cov = np.empty((J, x.shape[1], x.shape[1]))
    for j in range(J):
        wj = w * (label == j)
        n = wj.sum()
        if n < 1e-8:
            pi[j], mu[j], cov[j] = 1e-8, seeds[j], pooled
            continue
        pi[j] = n
        mu[j] = (wj[:, None] * x).sum(0) / n
        dev = x - mu[j]
        cov[j] = _floor_cov((wj[:, None] * dev).T @ dev / n)
    gmm = ColorGmm(pi / pi.sum(), mu, cov)
    return weighted_em_step(gmm, x, w)


def init_color_models(image3: np.ndarray, r: np.ndarray, J: int = 5, seed: int = 0):
    """``(theta_f, theta_b)`` from k-means++ seeds weighted by ``r`` and ``1 - r`` plus one EM pass.

    A side with fewer distinct colors than ``J`` gets fewer components.
    """
    x = np.asarray(image3, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(r, dtype=np.float64).ravel()
    if x.shape[0] != r.size:
        raise ValueError("image and segmentation sizes differ")
    rng = np.random.default_rng(seed)
    fg = _init_side(x, r, J, rng)
    bg = _init_side(x, 1.0 - r, J, rng)
    return fg, bg


def color_cost(image3: np.ndarray, fg: ColorGmm, bg: ColorGmm, lam_c: float) -> np.ndarray:
    """``(2, H, W)`` costs of labelling each pixel foreground / background."""
    shape = image3.shape[:2]
    return lam_c * np.stack([-gmm_loglik(fg, image3).reshape(shape), -gmm_loglik(bg, image3).reshape(shape)])


def augmented_unaries(problem: Problem, state: PosteriorState, a) -> np.ndarray:
    """Segmentation unary ``g`` of the intensity model plus the color term."""
    return segmentation_unary(problem, state, problem.operator(a))


@dataclass
class ColorStep:
    """Extra coordinate-descent step: one weighted EM update per side."""

    image3: np.ndarray
    fg: ColorGmm
    bg: ColorGmm
    lam_c: float
    name: str = "color"

    def __call__(self, problem: Problem, state: PosteriorState, a) -> Problem:
        x = self.image3.reshape(-1, 3)
        r = state.r.ravel()
        fg = _accept(self.fg, weighted_em_step(self.fg, x, r), x, r)
        bg = _accept(self.bg, weighted_em_step(self.bg, x, 1.0 - r), x, 1.0 - r)
        self.fg, self.bg = fg, bg
        problem.color_cost = color_cost(self.image3, fg, bg, self.lam_c)
        return problem


def _accept(old, new, x, w):
    # the covariance floor can in principle cost a little likelihood; never go backwards
    if weighted_loglik(new, x, w) >= weighted_loglik(old, x, w):
        return new
    return old


def stage2_problem(luma: np.ndarray, image3: np.ndarray, gsm: GsmPrior, potts: PottsPrior,
                   noise: NoiseModel, pad: int, fg: ColorGmm, bg: ColorGmm, lam_c: float, **kw) -> Problem:
    filters = (ForwardDifference(1), ForwardDifference(0))
    cost = color_cost(image3, fg, bg, lam_c) if lam_c > 0 else None
    return Problem(np.asarray(luma, dtype=np.float64)[None], gsm, potts, noise, pad, filters=filters,
                   color_cost=cost, **kw)


@dataclass
class Stage2Result:
    state: PosteriorState
    fg: ColorGmm
    bg: ColorGmm
    latent: np.ndarray
    trace: list
    flags: dict


def run_stage2_level(problem: Problem, state: PosteriorState, a, image3: np.ndarray, fg: ColorGmm,
                     bg: ColorGmm, lam_c: float, iters: int = 5, level: int = 0, **kw) -> Stage2Result:
    """Alternate indicators, image, segmentation and color-model updates at fixed motion."""
    r_in = state.r
    extra = [ColorStep(image3, fg, bg, lam_c)] if lam_c > 0 else []
    if lam_c > 0:
        problem.color_cost = color_cost(image3, fg, bg, lam_c)
    res = run_level(problem, state, a, iters=iters, level=level, update_a=False, extra_steps=extra, **kw)
    flags = dict(res.flags)
    state = res.state
    if float(state.r.sum()) < MIN_FOREGROUND:
        log.info("stage 2 emptied the foreground; keeping the stage-1 mask")
        flags["empty_foreground"] = True
        state = state.replace(r=r_in)
    if extra:
        fg, bg = extra[0].fg, extra[0].bg
    latent = problem.crop.crop(state.mu[0])
    return Stage2Result(state, fg, bg, latent, res.trace, flags)


def initial_stage2_state(problem: Problem, r: np.ndarray) -> PosteriorState:
    st = initial_state(problem)
    return st.replace(r=np.clip(np.asarray(r, dtype=np.float64), R_EPS, 1 - R_EPS))

