"""Image containers, gradient-domain conversion, pyramids and I/O.

Images are plain float64 numpy arrays, ``(H, W)`` for single channel and
``(H, W, 3)`` for color, intensities in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img.astype(np.float64)
    return img[..., :3] @ LUMA_WEIGHTS


@dataclass(frozen=True)
class GradientPair:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape:
            raise ValueError(f"gradient shapes differ: {self.dx.shape} vs {self.dy.shape}")

    def stack(self) -> np.ndarray:
        """Channels first, ``(2, H, W)`` ordered (dx, dy)."""
        return np.stack([self.dx, self.dy])


def to_gradient_domain(img: np.ndarray) -> GradientPair:
    """Forward differences; the last column of dx and last row of dy are zero."""
    if img.ndim != 2:
        raise ValueError("to_gradient_domain expects a single-channel image; convert to luma first")
    img = np.asarray(img, dtype=np.float64)
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1, :] = img[1:, :] - img[:-1, :]
    return GradientPair(dx, dy)


# ---------------------------------------------------------------------------
# derivative filters acting on (latent) images


class ForwardDifference:
    """Forward-difference operator ``D`` along one axis (0 = vertical, 1 = horizontal).

    Rows of ``D`` at the far border are zero, matching `to_gradient_domain`.
    """

    def __init__(self, axis: int):
        if axis not in (0, 1):
            raise ValueError("axis must be 0 or 1")
        self.axis = axis
        self.name = "dx" if axis == 1 else "dy"

    @property
    def stencil(self) -> np.ndarray:
        s = np.array([-1.0, 1.0])
        return s[None, :] if self.axis == 1 else s[:, None]

    def _sl(self, lo, hi):
        return (slice(None), slice(lo, hi)) if self.axis == 1 else (slice(lo, hi), slice(None))

    def apply(self, x):
        out = np.zeros_like(x)
        out[self._sl(None, -1)] = x[self._sl(1, None)] - x[self._sl(None, -1)]
        return out

    def adjoint(self, w):
        out = np.zeros_like(w)
        out[self._sl(1, None)] += w[self._sl(None, -1)]
        out[self._sl(None, -1)] -= w[self._sl(None, -1)]
        return out

    def apply_sq(self, s):
        """``(D o D) s`` with ``o`` the elementwise square of the matrix entries."""
        out = np.zeros_like(s)
        out[self._sl(None, -1)] = s[self._sl(1, None)] + s[self._sl(None, -1)]
        return out

    def adjoint_sq(self, w):
        out = np.zeros_like(w)
        out[self._sl(1, None)] += w[self._sl(None, -1)]
        out[self._sl(None, -1)] += w[self._sl(None, -1)]
        return out


class IdentityFilter:
    """Prior acts on the latent values directly (latent already is a derivative image)."""

    name = "id"
    stencil = np.ones((1, 1))

    def apply(self, x):
        return x

    adjoint = apply
    apply_sq = apply
    adjoint_sq = apply


@dataclass(frozen=True)
class DerivativeFilterBank:
    filters: tuple = field(default_factory=lambda: (ForwardDifference(1), ForwardDifference(0)))

    def __post_init__(self):
        for f in self.filters:
            if abs(float(np.sum(f.stencil))) > 1e-12:
                raise ValueError(f"filter {f.name} does not sum to zero")

    def __len__(self):
        return len(self.filters)

    def __iter__(self):
        return iter(self.filters)

    @property
    def names(self):
        return [f.name for f in self.filters]


# ---------------------------------------------------------------------------
# padding / cropping between latent and observation index spaces


@dataclass(frozen=True)
class CropOperator:
    """Maps a latent image padded by ``pad`` on every side onto observation pixels."""

    pad: int
    obs_shape: tuple

    @property
    def latent_shape(self) -> tuple:
        h, w = self.obs_shape
        return (h + 2 * self.pad, w + 2 * self.pad)

    def crop(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-2:] != self.latent_shape:
            raise ValueError(f"latent shape {x.shape[-2:]} != {self.latent_shape}")
        p = self.pad
        h, w = self.obs_shape
        return x[..., p:p + h, p:p + w]

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        if v.shape[-2:] != tuple(self.obs_shape):
            raise ValueError(f"observation shape {v.shape[-2:]} != {self.obs_shape}")
        out = np.zeros(v.shape[:-2] + self.latent_shape)
        p = self.pad
        h, w = self.obs_shape
        out[..., p:p + h, p:p + w] = v
        return out

    def pad_replicate(self, v: np.ndarray) -> np.ndarray:
        p = self.pad
        widths = [(0, 0)] * (v.ndim - 2) + [(p, p), (p, p)]
        return np.pad(v, widths, mode="edge")


# ---------------------------------------------------------------------------
# pyramids


@dataclass(frozen=True)
class Pyramid:
    levels: list  # finest first
    scale_factor: float = 0.5

    def __len__(self):
        return len(self.levels)

    @property
    def shapes(self):
        return [lvl.shape[:2] for lvl in self.levels]


def half_shape(shape) -> tuple:
    return tuple(int(math.ceil(s * 0.5)) for s in shape[:2])


def pyramid_shapes(shape, min_dim: int = 32) -> list:
    """Level shapes, finest first.

    A level is kept while its longer side is at least ``min_dim`` and its
    shorter side at least ``min_dim / 2``.
    """
    shapes = [tuple(shape[:2])]
    while True:
        nxt = half_shape(shapes[-1])
        if max(nxt) < min_dim or min(nxt) < min_dim / 2:
            break
        shapes.append(nxt)
    return shapes


def resample(img: np.ndarray, shape, order: int = 1) -> np.ndarray:
    """Resample onto ``shape`` aligning pixel centers (bilinear, edge clamp)."""
    h, w = img.shape[:2]
    H, W = shape
    ys = (np.arange(H) + 0.5) * (h / H) - 0.5
    xs = (np.arange(W) + 0.5) * (w / W) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=order, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[..., k], [yy, xx], order=order, mode="nearest")
         for k in range(img.shape[2])], axis=-1)


_BINOMIAL = np.array([1.0, 2.0, 1.0]) / 4.0


def downsample(img: np.ndarray) -> np.ndarray:
    """3x3 binomial antialias followed by bilinear resampling to half size."""
    blurred = ndimage.correlate1d(img, _BINOMIAL, axis=0, mode="nearest")
    blurred = ndimage.correlate1d(blurred, _BINOMIAL, axis=1, mode="nearest")
    return resample(blurred, half_shape(img.shape))


def build_pyramid(img: np.ndarray, min_dim: int = 32) -> Pyramid:
    if min_dim < 16:
        raise ValueError("min_dim must be >= 16")
    shapes = pyramid_shapes(img.shape, min_dim)
    levels = [np.asarray(img, dtype=np.float64)]
    for _ in shapes[1:]:
        levels.append(downsample(levels[-1]))
    return Pyramid(levels)


# ---------------------------------------------------------------------------
# flow visualization (Middlebury color wheel)


def make_colorwheel() -> np.ndarray:
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    ncols = RY + YG + GC + CB + BM + MR
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel / 255.0


def flow_to_color(field: np.ndarray) -> np.ndarray:
    """Color-code a ``(H, W, 2)`` field; magnitude is normalized per image.

    Zero vectors map to white, the largest vector to a fully saturated color.
    """
    field = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(field)):
        raise ValueError("flow field contains non-finite values")
    u, v = field[..., 0], field[..., 1]
    mag = np.hypot(u, v)
    maxmag = mag.max() if mag.size else 0.0
    if maxmag <= 0:
        return np.ones(field.shape[:2] + (3,))
    rad = mag / maxmag
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    col = 1 - rad[..., None] * (1 - col)
    return np.clip(col, 0.0, 1.0)


def flow_overlay(gray: np.ndarray, field: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grayscale image with the color-coded field pasted inside ``mask``."""
    base = np.repeat(np.clip(gray, 0, 1)[..., None], 3, axis=-1)
    col = flow_to_color(np.where(mask[..., None], field, 0.0))
    m = mask.astype(bool)[..., None]
    return np.where(m, col, base)


# ---------------------------------------------------------------------------
# file I/O


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode in ("RGBA", "P", "LA", "CMYK", "YCbCr"):
            im = im.convert("RGB")
        if im.mode in ("I;16", "I"):
            raise ValueError("16-bit images are not supported")
        arr = np.asarray(im)
    if arr.dtype == bool:
        return arr.astype(np.float64)
    return arr.astype(np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    PILImage.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM. 2-channel arrays are stored as 3-channel with a zero third plane."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 2:
        arr = np.concatenate([arr, np.zeros(arr.shape[:2] + (1,), np.float32)], axis=2)
    if arr.ndim == 2:
        header = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"cannot store array of shape {arr.shape} as PFM")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip().decode("ascii")
        w, h = (int(t) for t in fh.readline().split())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if header == "PF":
        arr = data.reshape(h, w, 3)
    elif header == "Pf":
        arr = data.reshape(h, w)
    else:
        raise ValueError(f"{path}: not a PFM file")
    return arr[::-1].astype(np.float64)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
