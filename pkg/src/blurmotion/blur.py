"""Affine-parametrized non-uniform blur kernels and the blur operator.

The motion model maps pixel ``p`` with image-centred coordinates
``(px, py)`` to the displacement over the exposure

    u_x = a1 + a2 * py + a3 * px
    u_y = a4 + a5 * py + a6 * px

Each observed pixel integrates the latent image along the segment
``s * u(p)``, ``s`` in [-1/2, 1/2], rasterized with a Tukey-biweight bump of
radius ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _kernels

DEFAULT_C = 1.5
MIN_TIME_STEPS = 8


def as_params(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (6,):
        raise ValueError(f"affine parameters must have 6 entries, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("affine parameters must be finite")
    return a


def centered_coords(shape):
    h, w = shape
    py, px = np.meshgrid(np.arange(h) - (h - 1) / 2.0, np.arange(w) - (w - 1) / 2.0, indexing="ij")
    return py, px


def motion_field(a, shape) -> np.ndarray:
    """Per-pixel displacement ``(H, W, 2)`` holding ``(u_x, u_y)``."""
    a = as_params(a)
    py, px = centered_coords(shape)
    ux = a[0] + a[1] * py + a[2] * px
    uy = a[3] + a[4] * py + a[5] * px
    return np.stack([ux, uy], axis=-1)


def max_displacement(a, shape) -> float:
    """Largest ``|u|`` over the image; attained at a corner for affine fields."""
    a = as_params(a)
    h, w = shape
    best = 0.0
    for py in (-(h - 1) / 2.0, (h - 1) / 2.0):
        for px in (-(w - 1) / 2.0, (w - 1) / 2.0):
            best = max(best, math.hypot(a[0] + a[1] * py + a[2] * px, a[3] + a[4] * py + a[5] * px))
    return best


def required_pad(a, shape, c: float = DEFAULT_C) -> int:
    """Smallest latent padding that holds every kernel window."""
    a = as_params(a)
    h, w = shape
    best = 0
    for py in (-(h - 1) / 2.0, (h - 1) / 2.0):
        for px in (-(w - 1) / 2.0, (w - 1) / 2.0):
            ux = a[0] + a[1] * py + a[2] * px
            uy = a[3] + a[4] * py + a[5] * px
            best = max(best, _kernels.window_radius(ux, c), _kernels.window_radius(uy, c))
    return best


def time_steps(a, shape) -> int:
    """Even number of time intervals, at least two samples per pixel of path."""
    return max(MIN_TIME_STEPS, 2 * int(math.ceil(max_displacement(a, shape))))


def psf(xi, mu, c: float = DEFAULT_C) -> float:
    d2 = float(np.sum((np.asarray(xi, float) - np.asarray(mu, float)) ** 2))
    if d2 > c * c:
        return 0.0
    return (1.0 - d2 / (c * c)) ** 2


def psf_grad(xi, mu, c: float = DEFAULT_C) -> np.ndarray:
    """Derivative of `psf` with respect to the centre ``mu``."""
    diff = np.asarray(xi, float) - np.asarray(mu, float)
    d2 = float(np.sum(diff ** 2))
    if d2 > c * c:
        return np.zeros(2)
    return 4.0 * diff * (1.0 - d2 / (c * c)) / (c * c)


@dataclass(frozen=True)
class BlurKernel:
    """Dense kernel window; ``weights[ey + ry, ex + rx]`` is the weight of offset (ex, ey)."""

    weights: np.ndarray
    normalizer: float = 1.0

    @property
    def radius(self):
        ny, nx = self.weights.shape
        return (ny - 1) // 2, (nx - 1) // 2

    def offsets(self):
        ry, rx = self.radius
        ey, ex = np.meshgrid(np.arange(-ry, ry + 1), np.arange(-rx, rx + 1), indexing="ij")
        return ex, ey


def _pixel_u(a, pixel, shape):
    a = as_params(a)
    h, w = shape
    y, x = pixel
    py = y - (h - 1) / 2.0
    px = x - (w - 1) / 2.0
    return a[0] + a[1] * py + a[2] * px, a[3] + a[4] * py + a[5] * px, py, px


def build_kernel(a, pixel, shape, c: float = DEFAULT_C, T: int | None = None) -> BlurKernel:
    """Kernel of observation pixel ``pixel = (row, col)`` in an image of ``shape``."""
    if T is None:
        T = time_steps(a, shape)
    if T < 1:
        raise ValueError("T must be >= 1")
    ux, uy, _, _ = _pixel_u(a, pixel, shape)
    k, _, _ = _kernels.kernel_window(ux, uy, float(c), int(T), False)
    return BlurKernel(k)


def build_kernel_grad(a, pixel, shape, c: float = DEFAULT_C, T: int | None = None) -> np.ndarray:
    """The six derivative kernels ``dk/da_p`` stacked as ``(6, ny, nx)``."""
    if T is None:
        T = time_steps(a, shape)
    ux, uy, py, px = _pixel_u(a, pixel, shape)
    _, dkx, dky = _kernels.kernel_window(ux, uy, float(c), int(T), True)
    return np.stack([dkx, py * dkx, px * dkx, dky, py * dky, px * dky])


class BlurOperator:
    """Sparse blur matrix ``K^a`` from a padded latent image to the observation.

    Row ``i`` holds kernel ``k_i`` scattered around latent pixel ``i + pad``.
    Derivative matrices are kept per displacement component; the six
    parameter derivatives are those times the row factors ``(1, py, px)``.
    """

    def __init__(self, a, obs_shape, pad: int | None = None, c: float = DEFAULT_C,
                 T: int | None = None, with_grad: bool = False):
        self.a = as_params(a).copy()
        self.obs_shape = tuple(int(s) for s in obs_shape)
        self.c = float(c)
        if not 1.0 <= self.c <= 2.0:
            raise ValueError("psf width c must lie in [1, 2]")
        need = required_pad(self.a, self.obs_shape, self.c)
        self.pad = need if pad is None else int(pad)
        if self.pad < need:
            raise ValueError(f"pad {self.pad} too small for motion, need {need}")
        self.T = time_steps(self.a, self.obs_shape) if T is None else int(T)
        h, w = self.obs_shape
        self.latent_shape = (h + 2 * self.pad, w + 2 * self.pad)
        field = motion_field(self.a, self.obs_shape)
        self._ux = np.ascontiguousarray(field[..., 0].ravel())
        self._uy = np.ascontiguousarray(field[..., 1].ravel())
        py, px = centered_coords(self.obs_shape)
        self.row_factors = np.stack([np.ones(h * w), py.ravel(), px.ravel()])
        self._build(with_grad)

    def _build(self, with_grad):
        h, w = self.obs_shape
        n = h * w
        counts = _kernels.count_nonzeros(self._ux, self._uy, self.c, self.T)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        nnz = int(indptr[-1])
        indices = np.empty(nnz, dtype=np.int64)
        kdata = np.empty(nnz)
        gx = np.empty(nnz if with_grad else 0)
        gy = np.empty(nnz if with_grad else 0)
        _kernels.fill_operator(self._ux, self._uy, self.c, self.T, w, self.pad,
                               indptr, indices, kdata, gx, gy, with_grad)
        shape = (n, self.latent_shape[0] * self.latent_shape[1])
        self._indptr, self._indices = indptr, indices
        self.K = sp.csr_matrix((kdata, indices, indptr), shape=shape)
        self.K2 = sp.csr_matrix((kdata * kdata, indices, indptr), shape=shape)
        self._KT = self.K.T.tocsr()
        self._K2T = self.K2.T.tocsr()
        self.has_grad = with_grad
        if with_grad:
            self.dKx = sp.csr_matrix((gx, indices, indptr), shape=shape)
            self.dKy = sp.csr_matrix((gy, indices, indptr), shape=shape)

    @property
    def nnz(self) -> int:
        return self.K.nnz

    def _check_latent(self, x):
        if x.shape != self.latent_shape:
            raise ValueError(f"latent image has shape {x.shape}, operator expects {self.latent_shape}")

    def _check_obs(self, v):
        if v.shape != self.obs_shape:
            raise ValueError(f"observation image has shape {v.shape}, operator expects {self.obs_shape}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._check_latent(x)
        return (self.K @ x.ravel()).reshape(self.obs_shape)

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        self._check_obs(v)
        return (self._KT @ v.ravel()).reshape(self.latent_shape)

    def apply_squared(self, s: np.ndarray) -> np.ndarray:
        """``(K o K) s``."""
        self._check_latent(s)
        return (self.K2 @ s.ravel()).reshape(self.obs_shape)

    def apply_squared_transpose(self, v: np.ndarray) -> np.ndarray:
        self._check_obs(v)
        return (self._K2T @ v.ravel()).reshape(self.latent_shape)

    def _need_grad(self):
        if not self.has_grad:
            raise RuntimeError("operator was built without derivative kernels")

    def derivative_matrix(self, p: int) -> sp.csr_matrix:
        """``dK/da_p`` materialized (p = 0..5)."""
        self._need_grad()
        base = self.dKx if p < 3 else self.dKy
        return sp.diags(self.row_factors[p % 3]) @ base

    def jacobian_apply(self, x: np.ndarray) -> np.ndarray:
        """``(6, H, W)`` stack of ``dK/da_p x``."""
        self._check_latent(x)
        self._need_grad()
        xf = x.ravel()
        jx = self.dKx @ xf
        jy = self.dKy @ xf
        f = self.row_factors
        out = np.stack([jx * f[0], jx * f[1], jx * f[2], jy * f[0], jy * f[1], jy * f[2]])
        return out.reshape((6,) + self.obs_shape)

    def gauss_newton_terms(self, sigma: np.ndarray, r: np.ndarray):
        """``H0[p, q] = r^T (dK_p o dK_q) sigma`` and ``h0[p] = r^T (dK_p o K) sigma``."""
        self._check_latent(sigma)
        self._check_obs(r)
        self._need_grad()
        s = sigma.ravel()
        rf = r.ravel()
        shape = self.K.shape
        ind, ptr = self._indices, self._indptr
        gx, gy, k = self.dKx.data, self.dKy.data, self.K.data

        def rowsum(data):
            return sp.csr_matrix((data, ind, ptr), shape=shape) @ s

        mxx = rowsum(gx * gx)
        mxy = rowsum(gx * gy)
        myy = rowsum(gy * gy)
        kx = rowsum(gx * k)
        ky = rowsum(gy * k)
        f = self.row_factors
        H = np.zeros((6, 6))
        h = np.zeros(6)
        for p in range(3):
            h[p] = np.sum(rf * f[p] * kx)
            h[p + 3] = np.sum(rf * f[p] * ky)
            for q in range(p, 3):
                w = rf * f[p] * f[q]
                H[p, q] = np.sum(w * mxx)
                H[p + 3, q + 3] = np.sum(w * myy)
            for q in range(3):
                H[p, q + 3] = np.sum(rf * f[p] * f[q] * mxy)
        H = np.triu(H) + np.triu(H, 1).T
        return H, h

    def kernel_at(self, pixel) -> BlurKernel:
        return build_kernel(self.a, pixel, self.obs_shape, self.c, self.T)
