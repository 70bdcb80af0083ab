"""Sparse derivative prior (GSM), Potts segmentation prior and color GMMs."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Gaussian scale mixture on filter responses


@dataclass(frozen=True)
class GsmPrior:
    pi: np.ndarray
    sigma: np.ndarray
    filter_ids: tuple = ("dx", "dy")

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "sigma", sigma)
        if pi.shape != sigma.shape or pi.ndim != 1:
            raise ValueError("pi and sigma must be 1-d of equal length")
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-8:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(sigma <= 0) or np.any(np.diff(sigma) <= 0):
            raise ValueError("scales must be positive and strictly increasing")

    @property
    def J(self) -> int:
        return self.pi.size

    def log_density(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)[..., None]
        s2 = self.sigma ** 2
        comp = np.log(self.pi) - np.log(self.sigma) - 0.5 * LOG_2PI - f ** 2 / (2 * s2)
        return logsumexp(comp, axis=-1)

    def floored(self, min_sigma: float) -> "GsmPrior":
        """Raise every scale to at least ``min_sigma``; components that coincide are merged."""
        s = np.maximum(self.sigma, min_sigma)
        keep = np.r_[True, np.diff(s) > 0]
        pi = np.array([self.pi[s == v].sum() for v in s[keep]])
        return GsmPrior(pi, s[keep], self.filter_ids)

    def save(self, path) -> None:
        lines = [f"# gsm J={self.J} filters={','.join(self.filter_ids)}", "# pi_j sigma_j"]
        lines += [f"{p:.12g} {s:.12g}" for p, s in zip(self.pi, self.sigma)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "GsmPrior":
        pis, sigmas, filters, J = [], [], ("dx", "dy"), None
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("J="):
                        J = int(tok[2:])
                    elif tok.startswith("filters="):
                        filters = tuple(tok[8:].split(","))
                continue
            p, s = line.split()
            pis.append(float(p))
            sigmas.append(float(s))
        if J is not None and J != len(pis):
            raise ValueError(f"{path}: header says J={J} but found {len(pis)} components")
        pi = np.array(pis)
        return cls(pi / pi.sum(), np.array(sigmas), filters)


def default_gsm() -> GsmPrior:
    with resources.as_file(resources.files("blurmotion") / "data" / "gsm_default.txt") as p:
        return GsmPrior.load(p)


def gsm_em(samples, J: int = 4, iters: int = 300, tol: float = 1e-10):
    """Fit a zero-mean scale mixture by EM; returns ``(prior, loglik_trace)``."""
    x2 = np.asarray(samples, dtype=np.float64).ravel() ** 2
    n = x2.size
    if n < 10 * J:
        raise ValueError(f"need at least {10 * J} samples for J={J}, got {n}")
    if not np.any(x2 > 0):
        raise ValueError("all samples are zero; cannot fit scales")
    std = np.sqrt(x2.mean())
    lo = max(np.sqrt(np.percentile(x2, 10)), std * 1e-3)
    hi = max(np.sqrt(x2.max()), std)
    s2 = (np.geomspace(lo, hi, J) if J > 1 else np.array([std])) ** 2
    pi = np.full(J, 1.0 / J)
    trace = []
    for _ in range(iters):
        logc = np.log(pi) - 0.5 * np.log(s2) - 0.5 * LOG_2PI - x2[:, None] / (2 * s2)
        lse = logsumexp(logc, axis=1)
        trace.append(float(lse.sum()))
        w = np.exp(logc - lse[:, None])
        nk = w.sum(axis=0)
        keep = nk > 1e-10 * n
        pi = np.where(keep, nk / n, 1e-12)
        pi /= pi.sum()
        s2 = np.where(keep, (w * x2[:, None]).sum(axis=0) / np.maximum(nk, 1e-300), s2)
        s2 = np.maximum(s2, (std * 1e-6) ** 2)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-1]):
            break
    order = np.argsort(s2)
    sigma = np.sqrt(s2[order])
    # strictly increasing scales
    for j in range(1, J):
        sigma[j] = max(sigma[j], sigma[j - 1] * (1 + 1e-9))
    return GsmPrior(pi[order] / pi.sum(), sigma), trace


def fit_gsm(samples, J: int = 4, iters: int = 300) -> GsmPrior:
    return gsm_em(samples, J, iters)[0]


def gsm_indicator_update(prior: GsmPrior, fhat: np.ndarray) -> np.ndarray:
    """Scale responsibilities ``v``, shape ``(J,) + fhat.shape``, normalized over ``J``."""
    fhat = np.asarray(fhat, dtype=np.float64)
    shp = (-1,) + (1,) * fhat.ndim
    logw = (np.log(prior.pi) - np.log(prior.sigma)).reshape(shp) \
        - fhat[None] / (2.0 * prior.sigma.reshape(shp) ** 2)
    logw -= logsumexp(logw, axis=0, keepdims=True)
    return np.exp(logw)


# ---------------------------------------------------------------------------
# Potts prior on the segmentation, 8-neighbourhood

_HALF_NEIGHBOURS = ((0, 1), (1, -1), (1, 0), (1, 1))


def _shift_pairs(shape, dy, dx):
    """Slices (a, b) selecting every unordered pair (p, p + (dy, dx)) inside the grid."""
    h, w = shape
    ya = slice(0, h - dy)
    yb = slice(dy, h)
    if dx >= 0:
        xa, xb = slice(0, w - dx), slice(dx, w)
    else:
        xa, xb = slice(-dx, w), slice(0, w + dx)
    return (ya, xa), (yb, xb)


@dataclass(frozen=True)
class PottsPrior:
    lam: float = 2.0
    lam0: float = 0.05

    def __post_init__(self):
        if not (np.isfinite(self.lam) and np.isfinite(self.lam0)) or self.lam < 0 or self.lam0 < 0:
            raise ValueError("Potts weights must be finite and non-negative")

    @staticmethod
    def neighbour_sum(r: np.ndarray) -> np.ndarray:
        """``L_N r`` for the 8-neighbourhood adjacency."""
        out = np.zeros_like(r, dtype=np.float64)
        for dy, dx in _HALF_NEIGHBOURS:
            a, b = _shift_pairs(r.shape, dy, dx)
            out[a] += r[b]
            out[b] += r[a]
        return out

    def message(self, r: np.ndarray) -> np.ndarray:
        """``-lam L_N 1 + 2 lam L_N r``."""
        deg = self.neighbour_sum(np.ones_like(r, dtype=np.float64))
        return self.lam * (2.0 * self.neighbour_sum(r) - deg)

    @staticmethod
    def pair_disagreement(r: np.ndarray) -> float:
        """Expected number of disagreeing neighbour pairs, ``sum r_i + r_j - 2 r_i r_j``."""
        tot = 0.0
        for dy, dx in _HALF_NEIGHBOURS:
            a, b = _shift_pairs(r.shape, dy, dx)
            ra, rb = r[a], r[b]
            tot += float(np.sum(ra + rb - 2.0 * ra * rb))
        return tot

    def expected_energy(self, r: np.ndarray) -> float:
        return self.lam0 * float(np.sum(r)) + self.lam * self.pair_disagreement(r)

    def energy(self, h: np.ndarray) -> float:
        """Unnormalized ``-log p(h)`` of a binary mask."""
        return self.expected_energy(np.asarray(h, dtype=np.float64))


def potts_unary_and_message(prior: PottsPrior, r: np.ndarray) -> np.ndarray:
    return prior.message(r)


# ---------------------------------------------------------------------------
# color Gaussian mixtures

EIG_FLOOR = 1e-5


def _floor_cov(cov: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, V = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    return (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)


@dataclass(frozen=True)
class ColorGmm:
    pi: np.ndarray
    mu: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if abs(pi.sum() - 1.0) > 1e-8 or np.any(pi < 0):
            raise ValueError("GMM weights must be non-negative and sum to 1")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", np.linalg.cholesky(cov))

    @property
    def J(self) -> int:
        return self.pi.size

    def component_logpdf(self, x: np.ndarray) -> np.ndarray:
        """``log pi_j + log N(x | mu_j, Sigma_j)``, shape ``(N, J)``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mu.shape[1])
        d = x.shape[1]
        out = np.empty((x.shape[0], self.J))
        for j in range(self.J):
            L = self._chol[j]
            z = solve_triangular(L, (x - self.mu[j]).T, lower=True)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            with np.errstate(divide="ignore"):
                out[:, j] = np.log(self.pi[j]) - 0.5 * (d * LOG_2PI + logdet + np.sum(z * z, axis=0))
        return out


def gmm_loglik(gmm: ColorGmm, pixels: np.ndarray) -> np.ndarray:
    """``log sum_j pi_j N(y | mu_j, Sigma_j)`` for pixels ``(..., 3)``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    lead = pixels.shape[:-1]
    return logsumexp(gmm.component_logpdf(pixels), axis=1).reshape(lead)


def weighted_loglik(gmm: ColorGmm, pixels, weights) -> float:
    return float(np.sum(np.asarray(weights).ravel() * gmm_loglik(gmm, pixels).ravel()))


def weighted_em_step(gmm: ColorGmm, pixels: np.ndarray, weights: np.ndarray,
                     floor: float = EIG_FLOOR) -> ColorGmm:
    """One EM iteration where every pixel's contribution is scaled by its weight.

    A component whose weighted mass drops below 1e-8 is re-seeded at the
    pixel the current mixture explains worst.
    """
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, gmm.mu.shape[1])
    r = np.asarray(weights, dtype=np.float64).ravel()
    logc = gmm.component_logpdf(x)
    lse = logsumexp(logc, axis=1)
    alpha = np.exp(logc - lse[:, None])
    ra = alpha * r[:, None]
    N = ra.sum(axis=0)
    J, d = gmm.mu.shape
    mu = np.array(gmm.mu)
    cov = np.array(gmm.cov)
    total = r.sum()
    pooled = None
    for j in range(J):
        if N[j] < 1e-8:
            if pooled is None:
                m = (r[:, None] * x).sum(axis=0) / max(total, 1e-300)
                dev = x - m
                pooled = _floor_cov((r[:, None] * dev).T @ dev / max(total, 1e-300), floor)
            worst = int(np.argmax(np.where(r > 0, -lse, -np.inf)))
            mu[j] = x[worst]
            cov[j] = pooled
            N[j] = 1e-8
            continue
        mu[j] = ra[:, j] @ x / N[j]
        dev = x - mu[j]
        cov[j] = _floor_cov((ra[:, j:j + 1] * dev).T @ dev / N[j], floor)
    pi = N / N.sum()
    return ColorGmm(pi, mu, cov)
