"""Numba kernels for slice extraction and insertion on the Fourier grid.

All kernels share one geometry convention: a pixel with integer frequency
coordinate ``r = (kx, ky, 0)`` lands at the rotated coordinate ``R^T r``,
which is then read (project) or written (backproject) with
nearest-neighbor or trilinear interpolation.  Linear voxel indices follow
the layout contract in :mod:`fsld.grid` and are computed inline here for
speed; the two implementations are cross-checked in the test suite.

Rotated coordinates are clamped componentwise to ``floor(M/2) - 1`` before
interpolation.  For masked pixels the clamp only ever removes
last-ulp rounding excess (rotations preserve the radius), and it
guarantees that every interpolation read/write stays on the grid.

Scatter kernels accumulate into per-chunk partial volumes over a fixed
chunk size (independent of worker count) and the caller folds the partials
in chunk order, so results are bit-identical no matter how many threads
execute the ``prange``.
"""

from __future__ import annotations

import os

import numpy as np

# The portable threading layer avoids a noisy probe of TBB/OpenMP; override
# with NUMBA_THREADING_LAYER if desired.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from numba import njit, prange  # noqa: E402

# Images per partial volume in scatter kernels.  Fixed so that results do
# not depend on the number of threads.
SCATTER_CHUNK = 64


def n_chunks(n_images: int) -> int:
    return (n_images + SCATTER_CHUNK - 1) // SCATTER_CHUNK


@njit(inline="always")
def _rotate_pixel(rt, b, px, py, bnd):
    # Coordinate a of R^T r is sum_b R[b, a] * r[b]; r has kz = 0.
    cx = rt[b, 0, 0] * px + rt[b, 1, 0] * py
    cy = rt[b, 0, 1] * px + rt[b, 1, 1] * py
    cz = rt[b, 0, 2] * px + rt[b, 1, 2] * py
    if cx > bnd:
        cx = bnd
    elif cx < -bnd:
        cx = -bnd
    if cy > bnd:
        cy = bnd
    elif cy < -bnd:
        cy = -bnd
    if cz > bnd:
        cz = bnd
    elif cz < -bnd:
        cz = -bnd
    return cx, cy, cz


@njit(inline="always")
def _lin_index(ix, iy, iz, M, c2):
    zi = iz + M if iz < 0 else iz
    return (zi * M + iy + c2) * M + ix + c2


@njit(inline="always")
def _nn_index(cx, cy, cz, M, c2):
    # Nearest lattice point; exact half-integer ties pick the candidate
    # with the smallest linear index (z wraps, so indices are compared
    # explicitly rather than coordinates).
    fx = np.floor(cx)
    fy = np.floor(cy)
    fz = np.floor(cz)
    wx = cx - fx
    wy = cy - fy
    wz = cz - fz
    ix0 = int(fx)
    iy0 = int(fy)
    iz0 = int(fz)
    tie = (wx == 0.5) or (wy == 0.5) or (wz == 0.5)
    if not tie:
        ix = ix0 + 1 if wx > 0.5 else ix0
        iy = iy0 + 1 if wy > 0.5 else iy0
        iz = iz0 + 1 if wz > 0.5 else iz0
        return _lin_index(ix, iy, iz, M, c2)
    best = -1
    for dx in range(2):
        if wx == 0.5:
            ix = ix0 + dx
        elif wx > 0.5:
            ix = ix0 + 1
        else:
            ix = ix0
        for dy in range(2):
            if wy == 0.5:
                iy = iy0 + dy
            elif wy > 0.5:
                iy = iy0 + 1
            else:
                iy = iy0
            for dz in range(2):
                if wz == 0.5:
                    iz = iz0 + dz
                elif wz > 0.5:
                    iz = iz0 + 1
                else:
                    iz = iz0
                j = _lin_index(ix, iy, iz, M, c2)
                if best < 0 or j < best:
                    best = j
                if wz != 0.5:
                    break
            if wy != 0.5:
                break
        if wx != 0.5:
            break
    return best


@njit(cache=True)
def assign_nn(rt, pix, M):
    """Nearest-neighbor voxel index for every (image, masked pixel) pair."""
    B = rt.shape[0]
    n = pix.shape[0]
    c2 = (M + 1) // 2
    bnd = float(M // 2 - 1)
    out = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        for p in range(n):
            cx, cy, cz = _rotate_pixel(rt, b, pix[p, 0], pix[p, 1], bnd)
            out[b, p] = _nn_index(cx, cy, cz, M, c2)
    return out


@njit(cache=True, parallel=True)
def project_tri(v, rt, pix, phase, ctf, M, out):
    B = rt.shape[0]
    n = pix.shape[0]
    c2 = (M + 1) // 2
    bnd = float(M // 2 - 1)
    for b in prange(B):
        for p in range(n):
            cx, cy, cz = _rotate_pixel(rt, b, pix[p, 0], pix[p, 1], bnd)
            fx = np.floor(cx)
            fy = np.floor(cy)
            fz = np.floor(cz)
            wx = cx - fx
            wy = cy - fy
            wz = cz - fz
            ix0 = int(fx)
            iy0 = int(fy)
            iz0 = int(fz)
            # Degenerate axes keep the low corner so index stays on-grid.
            ix1 = ix0 + 1 if wx > 0.0 else ix0
            iy1 = iy0 + 1 if wy > 0.0 else iy0
            iz1 = iz0 + 1 if wz > 0.0 else iz0
            ax = 1.0 - wx
            ay = 1.0 - wy
            az = 1.0 - wz
            j000 = _lin_index(ix0, iy0, iz0, M, c2)
            j100 = _lin_index(ix1, iy0, iz0, M, c2)
            j010 = _lin_index(ix0, iy1, iz0, M, c2)
            j110 = _lin_index(ix1, iy1, iz0, M, c2)
            j001 = _lin_index(ix0, iy0, iz1, M, c2)
            j101 = _lin_index(ix1, iy0, iz1, M, c2)
            j011 = _lin_index(ix0, iy1, iz1, M, c2)
            j111 = _lin_index(ix1, iy1, iz1, M, c2)
            acc = (
                az * (ay * (ax * v[j000] + wx * v[j100])
                      + wy * (ax * v[j010] + wx * v[j110]))
                + wz * (ay * (ax * v[j001] + wx * v[j101])
                        + wy * (ax * v[j011] + wx * v[j111]))
            )
            out[b, p] = acc * phase[b, p] * ctf[b, p]


@njit(cache=True, parallel=True)
def project_nn(v, rt, pix, phase, ctf, M, out):
    B = rt.shape[0]
    n = pix.shape[0]
    c2 = (M + 1) // 2
    bnd = float(M // 2 - 1)
    for b in prange(B):
        for p in range(n):
            cx, cy, cz = _rotate_pixel(rt, b, pix[p, 0], pix[p, 1], bnd)
            j = _nn_index(cx, cy, cz, M, c2)
            out[b, p] = v[j] * phase[b, p] * ctf[b, p]


@njit(cache=True, parallel=True)
def backproject_tri(img, rt, pix, phase, ctf, M, vols):
    """Adjoint of ``project_tri``: scatter conj(phase) * ctf * img."""
    B = rt.shape[0]
    n = pix.shape[0]
    c2 = (M + 1) // 2
    bnd = float(M // 2 - 1)
    nch = vols.shape[0]
    for c in prange(nch):
        lo = c * SCATTER_CHUNK
        hi = min(lo + SCATTER_CHUNK, B)
        for b in range(lo, hi):
            for p in range(n):
                cx, cy, cz = _rotate_pixel(rt, b, pix[p, 0], pix[p, 1], bnd)
                fx = np.floor(cx)
                fy = np.floor(cy)
                fz = np.floor(cz)
                wx = cx - fx
                wy = cy - fy
                wz = cz - fz
                ix0 = int(fx)
                iy0 = int(fy)
                iz0 = int(fz)
                ix1 = ix0 + 1 if wx > 0.0 else ix0
                iy1 = iy0 + 1 if wy > 0.0 else iy0
                iz1 = iz0 + 1 if wz > 0.0 else iz0
                ax = 1.0 - wx
                ay = 1.0 - wy
                az = 1.0 - wz
                val = img[b, p] * np.conj(phase[b, p]) * ctf[b, p]
                vols[c, _lin_index(ix0, iy0, iz0, M, c2)] += az * ay * ax * val
                vols[c, _lin_index(ix1, iy0, iz0, M, c2)] += az * ay * wx * val
                vols[c, _lin_index(ix0, iy1, iz0, M, c2)] += az * wy * ax * val
                vols[c, _lin_index(ix1, iy1, iz0, M, c2)] += az * wy * wx * val
                vols[c, _lin_index(ix0, iy0, iz1, M, c2)] += wz * ay * ax * val
                vols[c, _lin_index(ix1, iy0, iz1, M, c2)] += wz * ay * wx * val
                vols[c, _lin_index(ix0, iy1, iz1, M, c2)] += wz * wy * ax * val
                vols[c, _lin_index(ix1, iy1, iz1, M, c2)] += wz * wy * wx * val


@njit(cache=True, parallel=True)
def backproject_nn(img, rt, pix, phase, ctf, M, vols):
    """Adjoint of ``project_nn``."""
    B = rt.shape[0]
    n = pix.shape[0]
    c2 = (M + 1) // 2
    bnd = float(M // 2 - 1)
    nch = vols.shape[0]
    for c in prange(nch):
        lo = c * SCATTER_CHUNK
        hi = min(lo + SCATTER_CHUNK, B)
        for b in range(lo, hi):
            for p in range(n):
                cx, cy, cz = _rotate_pixel(rt, b, pix[p, 0], pix[p, 1], bnd)
                j = _nn_index(cx, cy, cz, M, c2)
                vols[c, j] += img[b, p] * np.conj(phase[b, p]) * ctf[b, p]


@njit(cache=True, parallel=True)
def scatter_sq_tri(weights, rt, pix, M, vols):
    """Scatter squared trilinear weights times per-pixel real weights.

    Computes, per voxel, sum over (image, pixel, corner) of
    ``w_corner**2 * weights[b, p]``; with ``weights = |C|**2`` this is the
    exact diagonal of the trilinear normal operator (without the
    regularizer).
    """
    B = rt.shape[0]
    n = pix.shape[0]
    c2 = (M + 1) // 2
    bnd = float(M // 2 - 1)
    nch = vols.shape[0]
    for c in prange(nch):
        lo = c * SCATTER_CHUNK
        hi = min(lo + SCATTER_CHUNK, B)
        for b in range(lo, hi):
            for p in range(n):
                cx, cy, cz = _rotate_pixel(rt, b, pix[p, 0], pix[p, 1], bnd)
                fx = np.floor(cx)
                fy = np.floor(cy)
                fz = np.floor(cz)
                wx = cx - fx
                wy = cy - fy
                wz = cz - fz
                ix0 = int(fx)
                iy0 = int(fy)
                iz0 = int(fz)
                ix1 = ix0 + 1 if wx > 0.0 else ix0
                iy1 = iy0 + 1 if wy > 0.0 else iy0
                iz1 = iz0 + 1 if wz > 0.0 else iz0
                ax = 1.0 - wx
                ay = 1.0 - wy
                az = 1.0 - wz
                s = weights[b, p]
                vols[c, _lin_index(ix0, iy0, iz0, M, c2)] += (az * ay * ax) ** 2 * s
                vols[c, _lin_index(ix1, iy0, iz0, M, c2)] += (az * ay * wx) ** 2 * s
                vols[c, _lin_index(ix0, iy1, iz0, M, c2)] += (az * wy * ax) ** 2 * s
                vols[c, _lin_index(ix1, iy1, iz0, M, c2)] += (az * wy * wx) ** 2 * s
                vols[c, _lin_index(ix0, iy0, iz1, M, c2)] += (wz * ay * ax) ** 2 * s
                vols[c, _lin_index(ix1, iy0, iz1, M, c2)] += (wz * ay * wx) ** 2 * s
                vols[c, _lin_index(ix0, iy1, iz1, M, c2)] += (wz * wy * ax) ** 2 * s
                vols[c, _lin_index(ix1, iy1, iz1, M, c2)] += (wz * wy * wx) ** 2 * s


def fold_chunks(vols: np.ndarray) -> np.ndarray:
    """Combine per-chunk partial volumes in fixed (chunk-index) order."""
    out = vols[0].copy()
    for c in range(1, vols.shape[0]):
        out += vols[c]
    return out
