"""Canonical indexing of the discretized Fourier grids.

Everything in this package lives on an ``M x M x M`` Fourier-domain voxel
grid (volumes) and its ``M x M`` central slice (images).  This module owns
the one true mapping between linear indices and integer frequency
coordinates; every serialized volume/image uses it, so it is documented
here bit-exactly.

Layout contract
---------------
Integer frequencies per axis span the half-open interval
``[-ceil(M/2), floor(M/2))``.

* ``x`` and ``y`` axes are stored in signed-centered ascending order:
  ``axis_index = k + ceil(M/2)``.
* the ``z`` axis is stored in wrapped (FFT) order so that ``kz = 0`` is the
  first slice: ``z_index = kz`` for ``kz >= 0`` and ``kz + M`` otherwise.

A voxel ``(kx, ky, kz)`` has linear index

    ``j = (z_index * M + y_index) * M + x_index``

which makes the first ``M**2`` entries of a vectorized volume exactly the
``kz = 0`` slice, and the image (pixel) layout the restriction of the
volume layout to that slice.  The DC voxel ``(0, 0, 0)`` sits at linear
index ``ceil(M/2) * (M + 1)``.

Radial shells bin grid points by the nearest integer to their Euclidean
frequency radius.  Masks keep points with rounded radius at most a cutoff
``mask_radius <= floor(M/2) - 1``; any rotation of such a point stays
strictly inside the grid, so interpolation never reads out of bounds.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "GridSpec",
    "ShellTable",
    "shell_table",
    "disk_mask",
    "ball_mask",
]


@dataclass(frozen=True)
class GridSpec:
    """Cubic Fourier grid of side length ``M``.

    Immutable and hashable; derived coordinate arrays are cached per spec.
    """

    M: int

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ValueError(f"grid side length must be >= 2, got {self.M}")

    @property
    def n_pixels(self) -> int:
        return self.M * self.M

    @property
    def n_voxels(self) -> int:
        return self.M ** 3

    @property
    def half(self) -> int:
        """Nyquist index ``floor(M/2)``."""
        return self.M // 2

    @property
    def centre(self) -> int:
        """Offset ``ceil(M/2)`` added to kx/ky to form axis indices."""
        return (self.M + 1) // 2

    @property
    def max_mask_radius(self) -> int:
        """Largest rotation-safe mask radius, ``floor(M/2) - 1``."""
        return self.half - 1

    @property
    def dc_index(self) -> int:
        """Linear voxel index of the DC component (0, 0, 0)."""
        return self.centre * (self.M + 1)

    @property
    def dc_pixel_index(self) -> int:
        """Linear pixel index of the DC component (0, 0)."""
        return self.centre * (self.M + 1)

    # -- scalar index <-> coordinate maps ---------------------------------

    def coords_of_index(self, j: int, dim: int = 3) -> tuple[int, ...]:
        """Integer frequency tuple of linear index ``j``.

        ``dim=2`` interprets ``j`` as a pixel index on the ``kz = 0``
        slice, ``dim=3`` as a voxel index.
        """
        M = self.M
        if dim == 2:
            if not 0 <= j < self.n_pixels:
                raise ValueError(f"pixel index {j} out of range for M={M}")
            y_idx, x_idx = divmod(int(j), M)
            return (x_idx - self.centre, y_idx - self.centre)
        if dim == 3:
            if not 0 <= j < self.n_voxels:
                raise ValueError(f"voxel index {j} out of range for M={M}")
            z_idx, rem = divmod(int(j), M * M)
            y_idx, x_idx = divmod(rem, M)
            kz = z_idx if z_idx < M - self.centre else z_idx - M
            return (x_idx - self.centre, y_idx - self.centre, kz)
        raise ValueError(f"dim must be 2 or 3, got {dim}")

    def index_of_coords(self, coords: tuple[int, ...]) -> int:
        """Linear index of an integer frequency tuple (2- or 3-tuple)."""
        M = self.M
        lo, hi = -self.centre, M - self.centre
        for k in coords:
            if not lo <= k < hi:
                raise ValueError(f"frequency {coords} out of range for M={M}")
        if len(coords) == 2:
            kx, ky = coords
            return (ky + self.centre) * M + (kx + self.centre)
        if len(coords) == 3:
            kx, ky, kz = coords
            z_idx = kz if kz >= 0 else kz + M
            return (z_idx * M + ky + self.centre) * M + (kx + self.centre)
        raise ValueError("coords must have length 2 or 3")

    # -- vectorized coordinate arrays --------------------------------------

    def pixel_coords(self) -> np.ndarray:
        """(M^2, 2) int array: frequency (kx, ky) per ascending pixel index."""
        return _pixel_coords(self)

    def voxel_coords(self) -> np.ndarray:
        """(M^3, 3) int array: frequency (kx, ky, kz) per ascending voxel index."""
        return _voxel_coords(self)

    def pixel_radii(self) -> np.ndarray:
        """(M^2,) Euclidean frequency radius per pixel."""
        c = self.pixel_coords()
        return np.sqrt((c.astype(np.float64) ** 2).sum(axis=1))

    def voxel_radii(self) -> np.ndarray:
        """(M^3,) Euclidean frequency radius per voxel."""
        c = self.voxel_coords()
        return np.sqrt((c.astype(np.float64) ** 2).sum(axis=1))


@lru_cache(maxsize=32)
def _pixel_coords(spec: GridSpec) -> np.ndarray:
    M = spec.M
    k = np.arange(M, dtype=np.int64) - spec.centre
    ky, kx = np.meshgrid(k, k, indexing="ij")
    out = np.stack([kx.ravel(), ky.ravel()], axis=1)
    out.setflags(write=False)
    return out

@lru_cache(maxsize=32)
def _voxel_coords(spec: GridSpec) -> np.ndarray:
    M = spec.M
    k = np.arange(M, dtype=np.int64) - spec.centre
    z_idx = np.arange(M, dtype=np.int64)
    kz_axis = np.where(z_idx < M - spec.centre, z_idx, z_idx - M)
    kz, ky, kx = np.meshgrid(kz_axis, k, k, indexing="ij")
    out = np.stack([kx.ravel(), ky.ravel(), kz.ravel()], axis=1)
    out.setflags(write=False)
    return out


def _check_mask_radius(spec: GridSpec, mask_radius: int, minimum: int) -> None:
    if not minimum <= mask_radius <= spec.max_mask_radius:
        raise ValueError(
            f"mask_radius must be in [{minimum}, {spec.max_mask_radius}] "
            f"for M={spec.M}, got {mask_radius}"
        )


def disk_mask(spec: GridSpec, mask_radius: int) -> np.ndarray:
    """Pixel indices with rounded radius <= ``mask_radius``, ascending."""
    _check_mask_radius(spec, mask_radius, minimum=0)
    shells = np.round(spec.pixel_radii()).astype(np.int64)
    return np.flatnonzero(shells <= mask_radius)


def ball_mask(spec: GridSpec, mask_radius: int) -> np.ndarray:
    """Voxel indices with rounded radius <= ``mask_radius``, ascending."""
    _check_mask_radius(spec, mask_radius, minimum=0)
    shells = np.round(spec.voxel_radii()).astype(np.int64)
    return np.flatnonzero(shells <= mask_radius)


@dataclass
class ShellTable:
    """Per-integer-radius shell membership and counts for one grid.

    ``shell_of_pixel`` / ``shell_of_voxel`` hold the shell index of every
    grid point in linear-index order, with -1 for points beyond
    ``max_radius``.  ``px_count[r]`` / ``vx_count[r]`` are the 2D / 3D
    shell populations.
    """

    spec: GridSpec
    max_radius: int
    px_count: np.ndarray
    vx_count: np.ndarray
    shell_of_pixel: np.ndarray
    shell_of_voxel: np.ndarray

    @property
    def radii(self) -> np.ndarray:
        return np.arange(self.max_radius + 1)

    def n_masked_pixels(self) -> int:
        return int(self.px_count.sum())

    def n_masked_voxels(self) -> int:
        return int(self.vx_count.sum())

    def shell_ratio(self, r: int) -> float:
        """P_x(r) / P_v(r): per-shell pixel to voxel count ratio."""
        if not 0 <= r <= self.max_radius:
            raise ValueError(f"radius {r} outside table range {self.max_radius}")
        if self.vx_count[r] == 0:
            raise ValueError(f"empty 3D shell at radius {r}")
        return float(self.px_count[r]) / float(self.vx_count[r])

    def pixel_voxel_ratio(self, r: int) -> float:
        """Cumulative |disk(r)| / |ball(r)| ratio used by the condition bound."""
        if not 0 <= r <= self.max_radius:
            raise ValueError(f"radius {r} outside table range {self.max_radius}")
        return float(self.px_count[: r + 1].sum()) / float(self.vx_count[: r + 1].sum())


def shell_table(spec: GridSpec, mask_radius: int) -> ShellTable:
    """Build the shell table for points with rounded radius <= ``mask_radius``."""
    _check_mask_radius(spec, mask_radius, minimum=1)
    px_shell = np.round(spec.pixel_radii()).astype(np.int64)
    vx_shell = np.round(spec.voxel_radii()).astype(np.int64)
    shell_of_pixel = np.where(px_shell <= mask_radius, px_shell, -1).astype(np.int32)
    shell_of_voxel = np.where(vx_shell <= mask_radius, vx_shell, -1).astype(np.int32)
    px_count = np.bincount(shell_of_pixel[shell_of_pixel >= 0], minlength=mask_radius + 1)
    vx_count = np.bincount(shell_of_voxel[shell_of_voxel >= 0], minlength=mask_radius + 1)
    return ShellTable(
        spec=spec,
        max_radius=mask_radius,
        px_count=px_count,
        vx_count=vx_count,
        shell_of_pixel=shell_of_pixel,
        shell_of_voxel=shell_of_voxel,
    )
