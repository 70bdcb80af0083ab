"""Compiled per-pixel kernel construction.

Each kernel is accumulated on a local window indexed by the integer offset
``(ey, ex)``. Time samples are split into the half with ``t < T/2`` and its
mirror image, so the assembled kernel is point-symmetric bit for bit and
``a`` and ``-a`` produce identical weights.
"""

import math

import numpy as np
from numba import njit, prange


@njit(cache=True)
def window_radius(u, c):
    return int(math.ceil(abs(u) * 0.5 + c))


@njit(cache=True)
def kernel_window(ux, uy, c, T, with_grad):
    """Kernel weights and d/du derivatives on a ``(2Ry+1, 2Rx+1)`` window.

    Returns ``(k, dk_dux, dk_duy)``; the derivative arrays are empty when
    ``with_grad`` is false.
    """
    Rx = window_radius(ux, c)
    Ry = window_radius(uy, c)
    ny = 2 * Ry + 1
    nx = 2 * Rx + 1
    P = np.zeros((ny, nx))
    Qx = np.zeros((ny, nx))
    Qy = np.zeros((ny, nx))
    c2 = c * c
    nhalf = (T + 1) // 2
    for t in range(nhalf):
        s = (2.0 * t - T) / (2.0 * T)
        mx = s * ux
        my = s * uy
        y0 = max(int(math.ceil(my - c)), -Ry)
        y1 = min(int(math.floor(my + c)), Ry)
        x0 = max(int(math.ceil(mx - c)), -Rx)
        x1 = min(int(math.floor(mx + c)), Rx)
        for ey in range(y0, y1 + 1):
            dy = ey - my
            for ex in range(x0, x1 + 1):
                dx = ex - mx
                d2 = dx * dx + dy * dy
                if d2 < c2:
                    q = 1.0 - d2 / c2
                    P[ey + Ry, ex + Rx] += q * q
                    if with_grad:
                        g = s * 4.0 * q / c2
                        Qx[ey + Ry, ex + Rx] += g * dx
                        Qy[ey + Ry, ex + Rx] += g * dy
    S = np.empty((ny, nx))
    for i in range(ny):
        for j in range(nx):
            S[i, j] = P[i, j] + P[ny - 1 - i, nx - 1 - j]
    if T % 2 == 0:
        # centre sample t = T/2 sits at the origin
        for ey in range(-Ry, Ry + 1):
            for ex in range(-Rx, Rx + 1):
                d2 = float(ex * ex + ey * ey)
                if d2 < c2:
                    q = 1.0 - d2 / c2
                    S[ey + Ry, ex + Rx] += q * q
    Z = 0.0
    for i in range(ny):
        for j in range(nx):
            Z += S[i, j]
    k = S / Z
    if not with_grad:
        return k, np.zeros((0, 0)), np.zeros((0, 0))
    Gx = np.empty((ny, nx))
    Gy = np.empty((ny, nx))
    sx = 0.0
    sy = 0.0
    for i in range(ny):
        for j in range(nx):
            Gx[i, j] = Qx[i, j] + Qx[ny - 1 - i, nx - 1 - j]
            Gy[i, j] = Qy[i, j] + Qy[ny - 1 - i, nx - 1 - j]
            sx += Gx[i, j]
            sy += Gy[i, j]
    dkx = (Gx - k * sx) / Z
    dky = (Gy - k * sy) / Z
    return k, dkx, dky


@njit(parallel=True, cache=True)
def count_nonzeros(ux, uy, c, T):
    n = ux.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        k, _, _ = kernel_window(ux[i], uy[i], c, T, False)
        cnt = 0
        for a in range(k.shape[0]):
            for b in range(k.shape[1]):
                if k[a, b] > 0.0:
                    cnt += 1
        counts[i] = cnt
    return counts


@njit(parallel=True, cache=True)
def fill_operator(ux, uy, c, T, width, pad, indptr, indices, kdata, gxdata, gydata, with_grad):
    """Write CSR rows; row ``i`` is observation pixel ``i`` (raster order)."""
    n = ux.shape[0]
    wl = width + 2 * pad
    for i in prange(n):
        yy = i // width
        xx = i - yy * width
        k, dkx, dky = kernel_window(ux[i], uy[i], c, T, with_grad)
        Ry = (k.shape[0] - 1) // 2
        Rx = (k.shape[1] - 1) // 2
        pos = indptr[i]
        for a in range(k.shape[0]):
            row = (yy + pad + a - Ry) * wl
            for b in range(k.shape[1]):
                if k[a, b] > 0.0:
                    indices[pos] = row + xx + pad + b - Rx
                    kdata[pos] = k[a, b]
                    if with_grad:
                        gxdata[pos] = dkx[a, b]
                        gydata[pos] = dky[a, b]
                    pos += 1
