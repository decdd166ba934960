"""Structure and conditioning of the normal operator H = sum_i P_i* C_i^2 P_i + lam*I.

For nearest-neighbor interpolation every ``P_i* P_i`` is diagonal, so H is
diagonal and fully described by per-voxel hit counts; this module computes
those counts, exact diagonals for both interpolation modes, Hessian-vector
products, and the condition-number diagnostics built on them.
"""

from __future__ import annotations

import numpy as np

from .forward import CtfParams, DatasetOperator, PASS_CHUNK, Pose, Projector
from .grid import GridSpec

__all__ = [
    "assignment_table",
    "hit_counts",
    "exact_diag",
    "hvp",
    "condition_number",
    "cond_lower_bound",
    "cond_bound_is_exact",
    "condition_report",
]


def assignment_table(poses: list[Pose], spec: GridSpec, mask: np.ndarray) -> np.ndarray:
    """Nearest-neighbor pixel-to-voxel map, shape (N, n_mask)."""
    proj = Projector(spec, mask, "nn")
    out = np.empty((len(poses), proj.n_mask), dtype=np.int64)
    for lo in range(0, len(poses), PASS_CHUNK):
        batch = poses[lo:lo + PASS_CHUNK]
        out[lo:lo + len(batch)] = proj.assign_nn(proj.rot_batch(batch))
    return out


def _first_hit_mask(idx_sorted: np.ndarray) -> np.ndarray:
    """Per-row mask of first occurrences in row-sorted index arrays."""
    first = np.ones_like(idx_sorted, dtype=bool)
    first[:, 1:] = idx_sorted[:, 1:] != idx_sorted[:, :-1]
    return first


def hit_counts(poses: list[Pose], spec: GridSpec, mask: np.ndarray) -> np.ndarray:
    """Per-voxel count of images whose slice reaches the voxel.

    A voxel touched several times by one image counts once, matching the
    idealized 0/1 analysis of the nearest-neighbor normal operator.
    """
    proj = Projector(spec, mask, "nn")
    counts = np.zeros(spec.n_voxels, dtype=np.int64)
    for lo in range(0, len(poses), PASS_CHUNK):
        batch = poses[lo:lo + PASS_CHUNK]
        idx = proj.assign_nn(proj.rot_batch(batch))
        idx.sort(axis=1)
        hits = idx[_first_hit_mask(idx)]
        counts += np.bincount(hits, minlength=spec.n_voxels)
    return counts


def exact_diag(
    poses: list[Pose],
    ctfs: list[CtfParams] | None,
    lam: float,
    mode: str,
    spec: GridSpec,
    mask: np.ndarray,
    dedupe: bool = False,
) -> np.ndarray:
    """Exact diagonal of H for the given interpolation mode.

    nn: each pixel adds ``|C|^2`` to its assigned voxel; with ``dedupe``
    repeated hits of one image on one voxel keep only the lowest-pixel-index
    contribution (the idealized analysis path).  tri: each pixel scatters
    its eight squared interpolation weights times ``|C|^2``.  ``lam`` is
    added everywhere.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if dedupe and mode != "nn":
        raise ValueError("dedupe is only defined for nn mode")
    proj = Projector(spec, mask, mode)
    diag = np.zeros(spec.n_voxels, dtype=np.float64)
    n = len(poses)
    for lo in range(0, n, PASS_CHUNK):
        batch = poses[lo:lo + PASS_CHUNK]
        rots = proj.rot_batch(batch)
        cvals = proj.ctf_batch(
            ctfs[lo:lo + len(batch)] if ctfs is not None else None, len(batch)
        )
        weights = np.ascontiguousarray(cvals ** 2)
        if mode == "tri":
            diag += proj.scatter_sq(rots, weights)
        else:
            idx = proj.assign_nn(rots)
            if dedupe:
                order = np.argsort(idx, axis=1, kind="stable")
                idx_sorted = np.take_along_axis(idx, order, axis=1)
                w_sorted = np.take_along_axis(weights, order, axis=1)
                keep = _first_hit_mask(idx_sorted)
                diag += np.bincount(idx_sorted[keep], weights=w_sorted[keep],
                                    minlength=spec.n_voxels)
            else:
                diag += np.bincount(idx.ravel(), weights=weights.ravel(),
                                    minlength=spec.n_voxels)
    return diag + lam


def hvp(
    op: DatasetOperator,
    z: np.ndarray,
    batch: np.ndarray,
    lam: float,
    n_total: int | None = None,
) -> np.ndarray:
    """Unbiased mini-batch Hessian-vector product, see DatasetOperator.hvp."""
    return op.hvp(z, batch, lam, n_total)


def condition_number(
    diag: np.ndarray,
    spec: GridSpec | None = None,
    restrict_radius: int | None = None,
) -> float:
    """max/min ratio of a (diagonal) Hessian, optionally within a ball.

    ``restrict_radius`` limits the entries to voxels with rounded Fourier
    radius at most that value (requires ``spec``).
    """
    diag = np.asarray(diag, dtype=np.float64)
    if restrict_radius is not None:
        if spec is None:
            raise ValueError("restrict_radius requires the grid spec")
        shells = np.round(spec.voxel_radii())
        diag = diag[shells <= restrict_radius]
    if diag.size == 0:
        raise ValueError("no entries selected")
    dmin = diag.min()
    if dmin <= 0:
        raise ValueError(
            "non-positive diagonal entry: lam = 0 with an unhit voxel "
            "makes the condition number undefined"
        )
    return float(diag.max() / dmin)


def cond_bound_is_exact(n_images: int, p_of_r: float) -> bool:
    """True in the regime 1/p(R) > N, where kappa = (N + lam)/lam exactly."""
    return 1.0 / p_of_r > n_images


def cond_lower_bound(n_images: int, lam: float, p_of_r: float) -> float:
    """Pigeonhole lower bound on kappa(H) from the pixel/voxel count ratio.

    ``p_of_r`` is the cumulative ratio |disk(R)| / |ball(R)|.  For
    ``1/p(R) <= N`` the bound is ``(N + lam) / (p(R) N + lam)``; beyond
    that some voxel is guaranteed unhit and the condition number equals
    ``(N + lam) / lam`` exactly (infinite when ``lam = 0``).
    """
    if not 0.0 < p_of_r <= 1.0:
        raise ValueError("p_of_r must lie in (0, 1]")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if cond_bound_is_exact(n_images, p_of_r):
        return float(np.inf) if lam == 0 else (n_images + lam) / lam
    return (n_images + lam) / (p_of_r * n_images + lam)


def condition_report(
    poses: list[Pose],
    ctfs: list[CtfParams] | None,
    lam: float,
    spec: GridSpec,
    mask: np.ndarray,
    radii: np.ndarray,
) -> dict[str, np.ndarray]:
    """Per-radius condition numbers and lower bounds for one pose set.

    The measured values use the nearest-neighbor diagonal (exact for nn);
    the no-CTF column comes from deduplicated hit counts, the CTF column
    from the CTF-weighted diagonal.
    """
    from .grid import shell_table

    n = len(poses)
    counts = hit_counts(poses, spec, mask)
    diag_noctf = counts.astype(np.float64) + lam
    diag_ctf = None
    if ctfs is not None:
        diag_ctf = exact_diag(poses, ctfs, lam, "nn", spec, mask)
    shells = shell_table(spec, spec.max_mask_radius)
    out = {
        "radius": np.asarray(radii, dtype=np.int64),
        "kappa_measured_noctf": np.empty(len(radii)),
        "kappa_measured_ctf": np.full(len(radii), np.nan),
        "lower_bound": np.empty(len(radii)),
        "one_over_lambda": np.full(len(radii), np.inf if lam == 0 else 1.0 / lam),
    }
    for i, r in enumerate(radii):
        out["kappa_measured_noctf"][i] = condition_number(diag_noctf, spec, int(r))
        if diag_ctf is not None:
            out["kappa_measured_ctf"][i] = condition_number(diag_ctf, spec, int(r))
        out["lower_bound"][i] = cond_lower_bound(n, lam, shells.pixel_voxel_ratio(int(r)))
    return out
