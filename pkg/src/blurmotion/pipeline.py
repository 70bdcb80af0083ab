"""Two-stage coarse-to-fine estimation of affine object motion and its segmentation.

Stage 1 runs on the gradient pyramid of the luma image and estimates the
motion with an initial segmentation. Stage 2 freezes the motion and refines
the segmentation in intensity space on the two finest levels, with color
models for foreground and background.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage
from threadpoolctl import threadpool_limits

from .blur import DEFAULT_C, as_params, motion_field, required_pad
from .image import build_pyramid, downsample, resample, to_gradient_domain, to_luma
from .priors import GsmPrior, PottsPrior, default_gsm
from .stage1 import (R_EPS, DegenerateLinearization, InferenceError, NoiseModel, PosteriorState,
                     initial_state, run_level, stage1_problem)
from .stage2 import init_color_models, initial_stage2_state, run_stage2_level, stage2_problem

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    c: float = DEFAULT_C
    time_steps: int = 0  # 0: automatic, max(8, 2 ceil(max |u|))
    sigma_n: float = 0.01
    sigma_n_coarse: float = 0.05
    lam: float = 2.0
    lam0: float = 0.15
    lam_c: float = 0.5
    lam0_stage2: float = 0.0
    gsm_path: str = ""
    gsm_floor: float = 2.0  # smallest GSM scale, in multiples of sigma_n (0 disables)
    min_dim: int = 32
    iters_stage1: int = 10
    iters_stage2: int = 5
    stage2_levels: int = 2
    color_components: int = 5
    initial_translation: float = 0.5
    initial_direction: str = "horizontal"
    pad_fraction: float = 0.125
    tau: float = 1e-3
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 20
    cg_tol: float = 1e-6
    cg_maxiter: int = 200
    rel_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        def check(ok, msg):
            if not ok:
                raise ConfigError(msg)

        check(1.0 <= self.c <= 2.0, "c must lie in [1, 2]")
        check(self.time_steps >= 0, "time_steps must be >= 0 (0 selects the automatic policy)")
        check(self.sigma_n > 0 and self.sigma_n_coarse >= self.sigma_n, "need 0 < sigma_n <= sigma_n_coarse")
        check(self.lam >= 0 and self.lam0 >= 0 and self.lam_c >= 0 and self.lam0_stage2 >= 0,
              "lam, lam0, lam_c and lam0_stage2 must be >= 0")
        check(self.gsm_floor >= 0, "gsm_floor must be >= 0")
        check(self.min_dim >= 16, "min_dim must be >= 16")
        check(self.iters_stage1 >= 1 and self.iters_stage2 >= 0, "iteration counts out of range")
        check(self.stage2_levels >= 0, "stage2_levels must be >= 0")
        check(self.color_components >= 1, "color_components must be >= 1")
        check(math.isfinite(self.initial_translation) and self.initial_translation != 0,
              "initial_translation must be nonzero: the motion update is singular at a = 0")
        check(self.initial_direction in ("horizontal", "vertical"),
              "initial_direction must be horizontal or vertical")
        check(0 < self.pad_fraction <= 0.5, "pad_fraction must lie in (0, 0.5]")
        check(self.tau > 0 and 0 < self.armijo < 1 and 0 < self.backtrack < 1, "bad step-control constants")
        check(self.max_backtracks >= 0 and self.cg_maxiter >= 1 and self.cg_tol > 0 and self.rel_tol >= 0,
              "bad solver limits")
        if self.gsm_path:
            check(Path(self.gsm_path).is_file(), f"GSM file not found: {self.gsm_path}")

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def parse_value(cls, key, text):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        kind = types[key]
        try:
            if kind in ("int", int):
                return int(text)
            if kind in ("float", float):
                return float(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
        return str(text)

    @classmethod
    def from_file(cls, path, **overrides) -> "Config":
        """Flat ``key = value`` file; ``#`` starts a comment. Unknown keys are rejected."""
        values = {}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, val = (t.strip() for t in line.split("=", 1))
            values[key] = cls.parse_value(key, val)
        values.update(overrides)
        return cls(**values)

    def dump(self) -> str:
        return "".join(f"{k} = {getattr(self, k)}\n" for k in self.keys())

    def gsm(self) -> GsmPrior:
        return GsmPrior.load(self.gsm_path) if self.gsm_path else default_gsm()

    def level_gsm(self, gsm: GsmPrior) -> GsmPrior:
        return gsm.floored(self.gsm_floor * self.sigma_n) if self.gsm_floor > 0 else gsm

    def noise_schedule(self, n_levels: int) -> list:
        """Noise level per pyramid level, finest first: halve from the coarsest value down to sigma_n."""
        out = [max(self.sigma_n, self.sigma_n_coarse * 0.5 ** (n_levels - 1 - k)) for k in range(n_levels)]
        return out


@dataclass
class Result:
    a: np.ndarray
    mask: np.ndarray
    r: np.ndarray
    motion_field: np.ndarray
    latent_mean: np.ndarray
    trace: list
    stage1_r: np.ndarray | None = None
    flags: dict = field(default_factory=dict)


def level_pad(shape, cfg: Config) -> int:
    return int(math.ceil(cfg.pad_fraction * max(shape))) + 2


def scale_params(a, factor: float) -> np.ndarray:
    """Parameters for an image rescaled by ``factor``: translations scale, linear terms do not."""
    a = as_params(a).copy()
    a[[0, 3]] *= factor
    return a


def initialize(problem, cfg: Config):
    """Stage-1 start: ``r = 0.5``, uniform indicators, latent mean = observed gradients."""
    t0 = cfg.initial_translation
    if t0 == 0 or not math.isfinite(t0):
        raise DegenerateLinearization("degenerate linearization; initialize with nonzero translation")
    state = initial_state(problem, r0=0.5)
    a = np.zeros(6)
    a[0 if cfg.initial_direction == "horizontal" else 3] = t0
    return state, a


def _upsample_latent(x, from_pad, to_obs, to_pad, gain):
    """Resample a padded latent image onto a finer padded grid (pixel centres aligned)."""
    H, W = to_obs
    Hl, Wl = H + 2 * to_pad, W + 2 * to_pad
    hc = x.shape[-2] - 2 * from_pad
    wc = x.shape[-1] - 2 * from_pad
    sy, sx = hc / H, wc / W
    ys = (np.arange(Hl) - to_pad + 0.5) * sy - 0.5 + from_pad
    xs = (np.arange(Wl) - to_pad + 0.5) * sx - 0.5 + from_pad
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.stack([ndimage.map_coordinates(ch, [yy, xx], order=1, mode="nearest") for ch in x])
    return out * gain


def propagate_level(state: PosteriorState, a, from_pad: int, problem) -> tuple:
    """Carry a stage-1 solution to the next finer level of ``problem``."""
    a2 = scale_params(a, 2.0)
    obs = problem.obs_shape
    r = np.clip(resample(state.r, obs), R_EPS, 1 - R_EPS)
    # gradient-domain values halve when the sampling grid is refined by two
    mu = _upsample_latent(state.mu, from_pad, obs, problem.pad, 0.5)
    sigma = np.maximum(_upsample_latent(state.sigma, from_pad, obs, problem.pad, 0.25), 0.0)
    J = problem.gsm.J
    v = np.full((problem.channels, len(problem.filters), J) + problem.latent_shape, 1.0 / J)
    return PosteriorState(mu, sigma, r, v), a2


def _motion_kw(cfg: Config):
    return dict(armijo=cfg.armijo, beta=cfg.backtrack, max_backtracks=cfg.max_backtracks)


def _problem_kw(cfg: Config):
    return dict(c=cfg.c, time_steps=cfg.time_steps or None, cg_tol=cfg.cg_tol, cg_maxiter=cfg.cg_maxiter)


def run_stage1(luma_pyr, cfg: Config, gsm: GsmPrior, trace: list):
    n = len(luma_pyr)
    sched = cfg.noise_schedule(n)
    potts = PottsPrior(cfg.lam, cfg.lam0)
    state = a = prev_pad = None
    tau = cfg.tau
    for lev in range(n - 1, -1, -1):
        grads = to_gradient_domain(luma_pyr[lev])
        pad = level_pad(grads.dx.shape, cfg)
        if a is not None:
            pad = max(pad, required_pad(scale_params(a, 2.0), grads.dx.shape, cfg.c) + 2)
        problem = stage1_problem(grads, cfg.level_gsm(gsm), potts, NoiseModel(sched[lev]), pad,
                                 **_problem_kw(cfg))
        if state is None:
            state, a = initialize(problem, cfg)
        else:
            state, a = propagate_level(state, a, prev_pad, problem)
        res = run_level(problem, state, a, iters=cfg.iters_stage1, level=lev, tau=tau,
                        rel_tol=cfg.rel_tol, motion_kw=_motion_kw(cfg))
        for rec in res.trace:
            rec.level = f"1:{lev}"
        trace.extend(res.trace)
        state, a, tau = res.state, res.a, max(res.tau, cfg.tau)
        prev_pad = pad
        log.info("stage 1 level %d (%dx%d): a = %s", lev, *grads.dx.shape, np.round(a, 4))
    return state, a


def run_stage2(luma_pyr, color_pyr, r_full, a_full, cfg: Config, gsm: GsmPrior, trace: list):
    n_lev = min(cfg.stage2_levels, len(luma_pyr))
    sched = cfg.noise_schedule(len(luma_pyr))
    potts = PottsPrior(cfg.lam, cfg.lam0_stage2)
    flags = {}
    r = r_full
    for k in range(n_lev):
        if k == 0:
            for _ in range(n_lev - 1):
                r = downsample(r)
        lev = n_lev - 1 - k
        luma, color = luma_pyr[lev], color_pyr[lev]
        r = np.clip(resample(r, luma.shape), R_EPS, 1 - R_EPS)
        a = scale_params(a_full, 0.5 ** lev)
        pad = max(level_pad(luma.shape, cfg), required_pad(a, luma.shape, cfg.c) + 2)
        fg, bg = init_color_models(color, r, cfg.color_components, seed=cfg.seed + lev)
        problem = stage2_problem(luma, color, cfg.level_gsm(gsm), potts, NoiseModel(sched[lev]), pad, fg, bg,
                                 cfg.lam_c, **_problem_kw(cfg))
        state = initial_stage2_state(problem, r)
        res = run_stage2_level(problem, state, a, color, fg, bg, cfg.lam_c, iters=cfg.iters_stage2,
                               level=lev, rel_tol=cfg.rel_tol)
        for rec in res.trace:
            rec.level = f"2:{lev}"
        trace.extend(res.trace)
        flags.update(res.flags)
        r = res.state.r
        latent = res.latent
    return r, latent, flags


def estimate(image: np.ndarray, cfg: Config | None = None) -> Result:
    """Estimate affine motion ``a`` (full resolution), segmentation and latent mean of ``image``."""
    cfg = cfg or Config()
    image = np.asarray(image, dtype=np.float64)
    if min(image.shape[:2]) < 32:
        raise ValueError("image must be at least 32 x 32")
    gsm = cfg.gsm()
    luma = to_luma(image)
    color = image[..., :3] if image.ndim == 3 else np.repeat(image[..., None], 3, axis=2)
    luma_pyr = build_pyramid(luma, cfg.min_dim).levels
    color_pyr = [color]
    for _ in luma_pyr[1:]:
        color_pyr.append(downsample(color_pyr[-1]))
    trace = []
    with threadpool_limits(1):
        s1_state, a = run_stage1(luma_pyr, cfg, gsm, trace)
        r1 = s1_state.r
        flags = {}
        if cfg.stage2_levels > 0 and cfg.iters_stage2 > 0:
            r, latent, flags = run_stage2(luma_pyr, color_pyr, r1, a, cfg, gsm, trace)
        else:
            r = r1
            latent = luma
    mask = r >= 0.5
    return Result(a, mask, r, motion_field(a, luma.shape), latent, trace, r1, flags)
