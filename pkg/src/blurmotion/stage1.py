"""Variational marginal-likelihood inference for motion, latent image and segmentation.

The same machinery serves both stages. Stage 1 works on the two gradient
channels of the observation, each with its own latent image whose values are
derivatives already (the prior acts on them directly). Stage 2 works on a
single intensity channel with forward-difference prior filters and an extra
per-pixel color cost on the segmentation.

The free energy is evaluated with all Gaussian normalizers included, so it
equals ``E_q[-log p(x, h, l, y | a)] - H[q]`` up to the (unknown) log
partition function of the Potts prior.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, xlogy

from .blur import DEFAULT_C, BlurOperator, as_params, required_pad
from .image import CropOperator, GradientPair, IdentityFilter
from .priors import LOG_2PI, GsmPrior, PottsPrior, gsm_indicator_update

log = logging.getLogger(__name__)

R_EPS = 1e-6


class DegenerateLinearization(RuntimeError):
    pass


class InferenceError(RuntimeError):
    """Failure inside the coordinate descent, annotated with level and step."""


@dataclass(frozen=True)
class NoiseModel:
    sigma_n: float = 0.01

    def __post_init__(self):
        if not self.sigma_n > 0:
            raise ValueError("sigma_n must be positive")


@dataclass(frozen=True)
class PosteriorState:
    """Factors of q: latent means/variances per channel, Bernoulli r, GSM indicators v.

    Shapes: ``mu, sigma: (C, Hl, Wl)``, ``r: (H, W)``, ``v: (C, G, J, Hl, Wl)``.
    """

    mu: np.ndarray
    sigma: np.ndarray
    r: np.ndarray
    v: np.ndarray

    def replace(self, **kw) -> "PosteriorState":
        return dataclasses.replace(self, **kw)

    def validate(self):
        if np.any(self.sigma < 0):
            raise ValueError("negative latent variance")
        if np.any(self.r < R_EPS * 0.999) or np.any(self.r > 1 - R_EPS * 0.999):
            raise ValueError("segmentation probabilities outside [eps, 1-eps]")
        if not np.allclose(self.v.sum(axis=2), 1.0, atol=1e-10):
            raise ValueError("indicator distributions do not sum to one")


@dataclass
class Problem:
    """Observation channels plus priors; builds blur operators on demand."""

    y: np.ndarray  # (C, H, W)
    gsm: GsmPrior
    potts: PottsPrior
    noise: NoiseModel
    pad: int
    filters: tuple = (IdentityFilter(),)
    c: float = DEFAULT_C
    time_steps: int | None = None
    # per-pixel segmentation costs of the color model, (cost_fg, cost_bg)
    color_cost: np.ndarray | None = None
    cg_tol: float = 1e-6
    cg_maxiter: int = 200
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 2:
            self.y = self.y[None]
        self.crop = CropOperator(int(self.pad), self.y.shape[1:])

    @property
    def obs_shape(self):
        return self.y.shape[1:]

    @property
    def latent_shape(self):
        return self.crop.latent_shape

    @property
    def channels(self):
        return self.y.shape[0]

    def fits(self, a) -> bool:
        return required_pad(a, self.obs_shape, self.c) <= self.pad

    def operator(self, a, with_grad: bool = False) -> BlurOperator:
        a = as_params(a)
        key = a.tobytes()
        op = self._cache.get(key)
        if op is not None and (op.has_grad or not with_grad):
            self._cache.move_to_end(key)
            return op
        op = BlurOperator(a, self.obs_shape, self.pad, self.c, self.time_steps, with_grad)
        self._cache[key] = op
        while len(self._cache) > 3:
            self._cache.popitem(last=False)
        return op


def stage1_problem(grads: GradientPair, gsm: GsmPrior, potts: PottsPrior, noise: NoiseModel,
                   pad: int, **kw) -> Problem:
    return Problem(grads.stack(), gsm, potts, noise, pad, filters=(IdentityFilter(),), **kw)


def initial_state(problem: Problem, r0: float = 0.5, mu=None) -> PosteriorState:
    """``mu`` = observation padded by edge replication, ``sigma = sigma_n^2``, uniform v."""
    C = problem.channels
    mu = problem.crop.pad_replicate(problem.y) if mu is None else np.asarray(mu, dtype=np.float64)
    sigma = np.full(mu.shape, problem.noise.sigma_n ** 2)
    r = np.full(problem.obs_shape, float(r0))
    J = problem.gsm.J
    v = np.full((C, len(problem.filters), J) + problem.latent_shape, 1.0 / J)
    return PosteriorState(mu, sigma, r, v)


# ---------------------------------------------------------------------------
# free energy


def expected_sq_response(filt, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """``(D mu)^2 + (D o D) sigma``."""
    d = filt.apply(mu)
    return d * d + filt.apply_sq(sigma)


def _lik_parts(problem: Problem, state: PosteriorState, op: BlurOperator):
    """Per-pixel expected squared residuals of the blurred and sharp explanations."""
    blur = np.zeros(problem.obs_shape)
    sharp = np.zeros(problem.obs_shape)
    for ch in range(problem.channels):
        y = problem.y[ch]
        km = op.apply(state.mu[ch])
        im = problem.crop.crop(state.mu[ch])
        blur += (km - y) ** 2 + op.apply_squared(state.sigma[ch])
        sharp += (im - y) ** 2 + problem.crop.crop(state.sigma[ch])
    return blur, sharp


def free_energy_terms(problem: Problem, state: PosteriorState, a, op: BlurOperator | None = None) -> dict:
    op = op if op is not None else problem.operator(a)
    s2n = problem.noise.sigma_n ** 2
    r = state.r
    blur, sharp = _lik_parts(problem, state, op)
    n_obs = r.size * problem.channels
    lik = float(np.sum(r * blur + (1.0 - r) * sharp)) / (2.0 * s2n) + 0.5 * n_obs * np.log(2 * np.pi * s2n)

    gsm = problem.gsm
    s2j = (gsm.sigma ** 2)[:, None, None]
    const_j = (np.log(gsm.sigma) - np.log(gsm.pi) + 0.5 * LOG_2PI)[:, None, None]
    prior = 0.0
    for ch in range(problem.channels):
        for g, filt in enumerate(problem.filters):
            fhat = expected_sq_response(filt, state.mu[ch], state.sigma[ch])
            v = state.v[ch, g]
            prior += float(np.sum(v * (fhat[None] / (2.0 * s2j) + const_j) + xlogy(v, v)))
    ent_x = -0.5 * float(np.sum(np.log(2 * np.pi * np.e * state.sigma)))
    seg = problem.potts.expected_energy(r) + float(np.sum(xlogy(r, r) + xlogy(1 - r, 1 - r)))
    color = 0.0
    if problem.color_cost is not None:
        color = float(np.sum(r * problem.color_cost[0] + (1 - r) * problem.color_cost[1]))
    total = lik + prior + ent_x + seg + color
    return dict(total=total, likelihood=lik, image_prior=prior, latent_entropy=ent_x,
                segmentation=seg, color=color)


def free_energy(problem: Problem, state: PosteriorState, a, op: BlurOperator | None = None) -> float:
    return free_energy_terms(problem, state, a, op)["total"]


# ---------------------------------------------------------------------------
# coordinate updates


def update_indicators(problem: Problem, state: PosteriorState) -> PosteriorState:
    v = np.empty_like(state.v)
    for ch in range(problem.channels):
        for g, filt in enumerate(problem.filters):
            fhat = expected_sq_response(filt, state.mu[ch], state.sigma[ch])
            v[ch, g] = gsm_indicator_update(problem.gsm, fhat)
    return state.replace(v=v)


def _prior_weights(problem: Problem, v_ch: np.ndarray) -> np.ndarray:
    """``w_g = sum_j v_gj / sigma_j^2`` per filter, shape ``(G, Hl, Wl)``."""
    inv = (1.0 / problem.gsm.sigma ** 2)[None, :, None, None]
    return np.sum(v_ch * inv, axis=1)


def pcg(matvec, rhs, x0, diag, tol=1e-6, maxiter=200):
    """Jacobi-preconditioned conjugate gradients.

    Stops once ``||rhs - A x|| <= tol * ||rhs||``. Returns ``(x, iters, converged, relres)``.
    """
    x = x0.copy()
    res = rhs - matvec(x)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return np.zeros_like(x0), 0, True, 0.0
    rel = np.linalg.norm(res) / bnorm
    if rel <= tol:
        return x, 0, True, rel
    z = res / diag
    p = z.copy()
    rz = float(np.sum(res * z))
    for it in range(1, maxiter + 1):
        Ap = matvec(p)
        pAp = float(np.sum(p * Ap))
        if pAp <= 0:
            return x, it, False, rel
        alpha = rz / pAp
        x += alpha * p
        res -= alpha * Ap
        rel = np.linalg.norm(res) / bnorm
        if rel <= tol:
            return x, it, True, rel
        z = res / diag
        rz_new = float(np.sum(res * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, False, rel


def image_system(problem: Problem, state: PosteriorState, op: BlurOperator, ch: int):
    """Matrix-free ``A_x``, right-hand side ``-b_x`` and exact ``diag(A_x)`` for one channel."""
    s2n = problem.noise.sigma_n ** 2
    r = state.r
    crop = problem.crop
    y = problem.y[ch]
    w = _prior_weights(problem, state.v[ch])
    filters = problem.filters

    def matvec(x):
        out = op.apply_transpose(r * op.apply(x)) + crop.adjoint((1.0 - r) * crop.crop(x))
        out /= s2n
        for g, filt in enumerate(filters):
            out += filt.adjoint(w[g] * filt.apply(x))
        return out

    rhs = (op.apply_transpose(r * y) + crop.adjoint((1.0 - r) * y)) / s2n
    diag = (op.apply_squared_transpose(r) + crop.adjoint(1.0 - r)) / s2n
    for g, filt in enumerate(filters):
        diag += filt.adjoint_sq(w[g])
    return matvec, rhs, diag


def update_image(problem: Problem, state: PosteriorState, a, op: BlurOperator | None = None,
                 diagnostics: dict | None = None) -> PosteriorState:
    """Solve for the latent means by CG and set variances to the inverse diagonal."""
    op = op if op is not None else problem.operator(a)
    mu = np.empty_like(state.mu)
    sigma = np.empty_like(state.sigma)
    for ch in range(problem.channels):
        matvec, rhs, diag = image_system(problem, state, op, ch)
        x, iters, ok, rel = pcg(matvec, rhs, state.mu[ch], diag, problem.cg_tol, problem.cg_maxiter)
        if not ok:
            log.debug("CG stopped at relative residual %.2e after %d iterations", rel, iters)
        if diagnostics is not None:
            diagnostics.setdefault("cg", []).append((iters, ok, rel))
        mu[ch] = x
        sigma[ch] = 1.0 / diag
    return state.replace(mu=mu, sigma=sigma)


def segmentation_unary(problem: Problem, state: PosteriorState, op: BlurOperator) -> np.ndarray:
    """Linear coefficient ``g`` of r in the free energy."""
    blur, sharp = _lik_parts(problem, state, op)
    g = problem.potts.lam0 + (blur - sharp) / (2.0 * problem.noise.sigma_n ** 2)
    if problem.color_cost is not None:
        g = g + problem.color_cost[0] - problem.color_cost[1]
    return g


def segmentation_energy(potts: PottsPrior, g: np.ndarray, r: np.ndarray) -> float:
    """Free energy as a function of r alone (up to an r-independent constant)."""
    return float(np.sum(g * r)) + potts.lam * potts.pair_disagreement(r) \
        + float(np.sum(xlogy(r, r) + xlogy(1 - r, 1 - r)))


def update_segmentation(problem: Problem, state: PosteriorState, a, op: BlurOperator | None = None,
                        omega: float = 1.0, max_halvings: int = 12) -> PosteriorState:
    """One parallel message-passing sweep, damped until the free energy does not rise.

    ``r_full - r_old`` is always a descent direction, so halving the damping
    factor eventually yields a decrease unless r is already stationary.
    """
    op = op if op is not None else problem.operator(a)
    g = segmentation_unary(problem, state, op)
    r_old = state.r
    r_full = expit(-g + problem.potts.message(r_old))
    e_old = segmentation_energy(problem.potts, g, r_old)
    w = float(omega)
    for _ in range(max_halvings + 1):
        r_new = np.clip((1.0 - w) * r_old + w * r_full, R_EPS, 1.0 - R_EPS)
        if segmentation_energy(problem.potts, g, r_new) <= e_old:
            return state.replace(r=r_new)
        w *= 0.5
    return state


def motion_system(problem: Problem, state: PosteriorState, op: BlurOperator):
    """Gauss-Newton matrix ``A0`` and vector ``b0`` of the linearized blur (unscaled by sigma_n^2)."""
    r = state.r
    A0 = np.zeros((6, 6))
    b0 = np.zeros(6)
    for ch in range(problem.channels):
        jac = op.jacobian_apply(state.mu[ch]).reshape(6, -1)
        resid = (op.apply(state.mu[ch]) - problem.y[ch]).ravel()
        rf = r.ravel()
        A0 += (jac * rf) @ jac.T
        b0 += jac @ (rf * resid)
        H0, h0 = op.gauss_newton_terms(state.sigma[ch], r)
        A0 += H0
        b0 += h0
    A0 = 0.5 * (A0 + A0.T)
    return A0, b0


@dataclass
class MotionStep:
    a: np.ndarray
    accepted: bool
    tau: float
    backtracks: int
    energy: float


def update_motion(problem: Problem, state: PosteriorState, a0, tau: float = 1e-3,
                  armijo: float = 1e-4, beta: float = 0.5, max_backtracks: int = 20,
                  energy0: float | None = None) -> MotionStep:
    """Levenberg-damped Gauss-Newton step on the free energy with Armijo backtracking."""
    a0 = as_params(a0)
    if not np.any(a0):
        raise DegenerateLinearization("degenerate linearization; initialize with nonzero translation")
    op = problem.operator(a0, with_grad=True)
    A0, b0 = motion_system(problem, state, op)
    scale = np.max(np.abs(np.diag(A0)))
    if not np.all(np.isfinite(A0)) or scale <= 0:
        raise DegenerateLinearization("degenerate linearization; initialize with nonzero translation")
    s2n = problem.noise.sigma_n ** 2
    grad = b0 / s2n
    d = np.linalg.solve(A0 + tau * np.eye(6), -b0)
    slope = float(grad @ d)
    f0 = free_energy(problem, state, a0, op) if energy0 is None else energy0
    if slope < 0:
        step = 1.0
        for m in range(max_backtracks + 1):
            trial = a0 + step * d
            if problem.fits(trial):
                f1 = free_energy(problem, state, trial)
                if f1 <= f0 + armijo * step * slope:
                    return MotionStep(trial, True, max(tau * 0.1, 1e-9), m, f1)
            step *= beta
    return MotionStep(a0.copy(), False, tau * 10.0, max_backtracks, f0)


# ---------------------------------------------------------------------------
# one pyramid level


@dataclass
class TraceRecord:
    level: int
    iteration: int
    step: str
    energy: float
    delta: float
    a: np.ndarray

    def tsv(self) -> str:
        return "\t".join([str(self.level), str(self.iteration), self.step, repr(float(self.energy)),
                          repr(float(self.delta))] + [repr(float(x)) for x in self.a])


TRACE_HEADER = "level\titer\tstep\tF\tdelta_F\ta1\ta2\ta3\ta4\ta5\ta6"


@dataclass
class LevelResult:
    state: PosteriorState
    a: np.ndarray
    trace: list
    tau: float
    flags: dict
    problem: Problem | None = None


def run_level(problem: Problem, state: PosteriorState, a, iters: int = 10, level: int = 0,
              tau: float = 1e-3, update_r: bool = True, update_a: bool = True,
              rel_tol: float = 1e-4, omega: float = 1.0, motion_kw: dict | None = None,
              extra_steps=None) -> LevelResult:
    """Coordinate descent: indicators, image, segmentation, motion (+ optional extra steps).

    ``extra_steps`` is a list of callables ``(problem, state, a) -> problem``
    run after the motion update; stage 2 uses it for the color models.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a = as_params(a).copy()
    trace = []
    flags = {"cg_failures": 0}
    motion_kw = motion_kw or {}
    F = free_energy(problem, state, a)
    trace.append(TraceRecord(level, 0, "init", F, 0.0, a.copy()))

    def record(it, step, F_new):
        nonlocal F
        trace.append(TraceRecord(level, it, step, F_new, F_new - F, a.copy()))
        F = F_new

    for it in range(1, iters + 1):
        F_start = F
        step = "indicators"
        try:
            state = update_indicators(problem, state)
            record(it, step, free_energy(problem, state, a))
            step = "image"
            diag = {}
            state = update_image(problem, state, a, diagnostics=diag)
            flags["cg_failures"] += sum(1 for c in diag.get("cg", []) if not c[1])
            record(it, step, free_energy(problem, state, a))
            if update_r:
                step = "segmentation"
                state = update_segmentation(problem, state, a, omega=omega)
                record(it, step, free_energy(problem, state, a))
            if update_a:
                step = "motion"
                res = update_motion(problem, state, a, tau=tau, energy0=F, **motion_kw)
                tau = res.tau
                a = res.a
                record(it, step, res.energy)
            for extra in extra_steps or ():
                step = getattr(extra, "name", "extra")
                problem = extra(problem, state, a)
                record(it, step, free_energy(problem, state, a))
        except DegenerateLinearization:
            raise
        except Exception as exc:  # annotate with context
            raise InferenceError(f"level {level}, iteration {it}, step {step}: {exc}") from exc
        if abs(F_start - F) < rel_tol * abs(F_start):
            break
    return LevelResult(state, a, trace, tau, flags, problem)
