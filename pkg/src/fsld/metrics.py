"""Reconstruction quality metrics: shell correlation, errors, convergence counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import FourierVolume
from .grid import ShellTable

__all__ = [
    "FscCurve",
    "fsc",
    "relative_l2",
    "epochs_to_threshold",
    "grad_variance_shells",
]


@dataclass
class FscCurve:
    """Per-shell normalized cross-correlation between two volumes.

    ``values`` holds the real part of the complex correlation; shells
    where either volume has zero energy are NaN with ``defined`` False.
    """

    radii: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    defined: np.ndarray

    def __len__(self) -> int:
        return self.values.size


def fsc(u: FourierVolume, v: FourierVolume, shells: ShellTable) -> FscCurve:
    """Fourier shell correlation of ``u`` against ``v``.

    Per shell ``S_r``: ``sum(u * conj(v)) / sqrt(sum|u|^2 * sum|v|^2)``.
    """
    if u.spec != v.spec or shells.spec != u.spec:
        raise ValueError("volumes and shell table must share one grid spec")
    sel = shells.shell_of_voxel >= 0
    s = shells.shell_of_voxel[sel].astype(np.int64)
    a = u.values[sel]
    b = v.values[sel]
    nsh = shells.max_radius + 1
    cross_re = (a * np.conj(b)).real
    num_re = np.bincount(s, weights=cross_re, minlength=nsh)
    pow_u = np.bincount(s, weights=np.abs(a) ** 2, minlength=nsh)
    pow_v = np.bincount(s, weights=np.abs(b) ** 2, minlength=nsh)
    defined = (pow_u > 0) & (pow_v > 0)
    values = np.full(nsh, np.nan)
    den = np.sqrt(pow_u[defined] * pow_v[defined])
    values[defined] = num_re[defined] / den
    return FscCurve(
        radii=shells.radii.copy(),
        values=values,
        counts=shells.vx_count.copy(),
        defined=defined,
    )


def relative_l2(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Relative l2 error ||estimate - truth|| / ||truth||."""
    truth = np.asarray(truth)
    estimate = np.asarray(estimate)
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ValueError("truth vector has zero norm")
    return float(np.linalg.norm(estimate - truth) / denom)


def epochs_to_threshold(fsc_history: np.ndarray, theta: float) -> np.ndarray:
    """First epoch index at which each shell's FSC reaches ``theta``.

    ``fsc_history`` is (epochs, shells); NaN entries never cross.  Shells
    that never reach the threshold get the sentinel -1.  The first
    crossing counts even if the curve later dips back below.
    """
    hist = np.asarray(fsc_history, dtype=np.float64)
    if hist.ndim != 2 or hist.shape[0] == 0:
        raise ValueError("fsc_history must be a nonempty (epochs, shells) array")
    with np.errstate(invalid="ignore"):
        crossed = hist >= theta
    out = np.full(hist.shape[1], -1, dtype=np.int64)
    any_cross = crossed.any(axis=0)
    out[any_cross] = crossed[:, any_cross].argmax(axis=0)
    return out


def grad_variance_shells(op, v, shells: ShellTable, config, precond=None):
    """Per-shell variance of the per-batch gradient at a fixed iterate.

    Splits one epoch into the configured batches, computes each batch
    gradient, takes the per-voxel sample variance (complex entries: sum of
    real and imaginary variances), then averages within shells.  Returns
    ``(variance, dinv)`` where ``dinv`` is the shell-averaged inverse of
    ``precond`` for overlays, or None.
    """
    from .optim import epoch_batches, loss_and_grad

    batches = epoch_batches(op.n_images, config.batch_size, config.seed, epoch=0)
    if len(batches) < 2:
        raise ValueError("gradient variance needs at least 2 batches per epoch")
    grads = np.empty((len(batches), op.spec.n_voxels), dtype=np.complex128)
    for k, batch in enumerate(batches):
        _, grads[k] = loss_and_grad(op, v, batch, config.lam)
    mean = grads.mean(axis=0)
    var = (np.abs(grads - mean) ** 2).sum(axis=0) / (len(batches) - 1)
    sel = shells.shell_of_voxel >= 0
    s = shells.shell_of_voxel[sel].astype(np.int64)
    nsh = shells.max_radius + 1
    counts = np.bincount(s, minlength=nsh).astype(np.float64)
    var_shells = np.bincount(s, weights=var[sel], minlength=nsh) / counts
    dinv_shells = None
    if precond is not None:
        dinv_shells = np.bincount(s, weights=1.0 / np.asarray(precond)[sel],
                                  minlength=nsh) / counts
    return var_shells, dinv_shells
