"""Stochastic reconstruction: plain and preconditioned SGD, and the CG reference.

The objective is the quadratic MAP loss

    f(v) = 1/2 sum_i ||x_i - C_i P_i v||^2 + lam/2 ||v||^2

whose Hessian ``H = sum_i P_i* C_i^2 P_i + lam I`` is independent of the
iterate.  Mini-batch quantities are scaled by ``N / batch`` so they are
unbiased for the full-dataset loss, gradient, and Hessian diagonal.

Four variants are supported:

* ``plain``              SGD, identity preconditioner;
* ``precomputed``        SGD preconditioned by the exact Hessian diagonal
                         (floored at the high-frequency threshold);
* ``estimated``          on-the-fly Hutchinson estimation with exponential
                         averaging and thresholding;
* ``estimated_nothresh`` the same without the threshold (ablation), with
                         a 1e-12 floor purely to keep division finite.

Every step uses backtracking (halving) line search on the batch loss with
the sufficient-decrease condition measured in the preconditioner norm; the
accepted step carries over to the next iteration and is never grown unless
``eta_growth`` is set above one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .forward import DatasetOperator, FourierVolume, ImageStack, ctf_eval
from .grid import ShellTable, shell_table
from .hessian import exact_diag
from .metrics import fsc, relative_l2

__all__ = [
    "OptimConfig",
    "PreconditionerState",
    "RunTrace",
    "VARIANTS",
    "epoch_batches",
    "rademacher",
    "loss_and_grad",
    "batch_loss",
    "hutchinson_update",
    "ema_and_threshold",
    "threshold_alpha",
    "armijo_search",
    "run",
    "reference_solve",
]

VARIANTS = ("plain", "precomputed", "estimated", "estimated_nothresh")

NOTHRESH_FLOOR = 1e-12
MAX_HALVINGS = 60


@dataclass
class OptimConfig:
    """Optimizer hyper-parameters; see module docstring for the variants."""

    lam: float
    batch_size: int
    epochs: int
    beta: float = 0.9
    c: float = 0.5
    eta0: float = 1.0
    variant: str = "estimated"
    seed: int = 0
    mode: str = "tri"
    eta_growth: float = 1.0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not 0.0 < self.c < 1.0:
            raise ValueError("c must lie in (0, 1)")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.mode not in ("nn", "tri"):
            raise ValueError("mode must be 'nn' or 'tri'")
        if self.eta_growth < 1.0:
            raise ValueError("eta_growth must be >= 1")


@dataclass
class PreconditionerState:
    """Running Hutchinson average and its exponential moving average."""

    d_avg: np.ndarray
    d: np.ndarray
    k: int
    alpha: float

    @classmethod
    def initial(cls, n_voxels: int, alpha: float) -> "PreconditionerState":
        return cls(
            d_avg=np.zeros(n_voxels),
            d=np.ones(n_voxels),
            k=0,
            alpha=alpha,
        )


@dataclass
class RunTrace:
    """Per-epoch and per-iteration records of one optimizer run."""

    loss: np.ndarray
    eta_end: np.ndarray
    backtracks: np.ndarray
    precond_rel_err: np.ndarray
    fsc_history: np.ndarray | None
    shell_radii: np.ndarray | None
    accepted_etas: list[float] = field(default_factory=list)
    armijo_steps: int = 0
    armijo_violations: int = 0
    final_dhat: np.ndarray | None = None


def epoch_batches(n_images: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Partition of a seeded per-epoch shuffle into consecutive batches."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(1, epoch))
    )
    perm = rng.permutation(n_images)
    return [perm[i:i + batch_size] for i in range(0, n_images, batch_size)]


def rademacher(rng: np.random.Generator, n: int) -> np.ndarray:
    """A +-1 vector with independent fair signs."""
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def _resid_pass(op: DatasetOperator, values: np.ndarray, batch: np.ndarray,
                want_grad: bool):
    """Streamed residual pass: data term and optionally its adjoint."""
    from .forward import PASS_CHUNK

    batch = np.asarray(batch)
    sq = 0.0
    acc = np.zeros(op.spec.n_voxels, dtype=np.complex128) if want_grad else None
    for lo in range(0, batch.size, PASS_CHUNK):
        sub = batch[lo:lo + PASS_CHUNK]
        resid = op.project(values, sub)
        resid -= op.x[sub]
        sq += float((resid.real ** 2 + resid.imag ** 2).sum())
        if want_grad:
            acc += op.backproject(resid, sub)
    return sq, acc


def loss_and_grad(
    op: DatasetOperator,
    v: np.ndarray,
    batch: np.ndarray,
    lam: float,
    n_total: int | None = None,
) -> tuple[float, np.ndarray]:
    """Mini-batch loss and gradient, scaled to full-dataset units.

    With the full batch the gradient equals ``H v - b``.  The complex
    vector returned encodes the real gradient with respect to
    (Re v, Im v) in its real and imaginary parts.
    """
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    if n_total is None:
        n_total = op.n_images
    scale = n_total / batch.size
    v = np.asarray(v, dtype=np.complex128)
    sq, acc = _resid_pass(op, v, batch, want_grad=True)
    loss = 0.5 * scale * sq + 0.5 * lam * float(
        (v.real ** 2 + v.imag ** 2).sum()
    )
    grad = scale * acc + lam * v
    return loss, grad


def batch_loss(
    op: DatasetOperator,
    v: np.ndarray,
    batch: np.ndarray,
    lam: float,
    n_total: int | None = None,
) -> float:
    """Mini-batch loss only (used by the line search)."""
    batch = np.asarray(batch)
    if n_total is None:
        n_total = op.n_images
    scale = n_total / batch.size
    v = np.asarray(v, dtype=np.complex128)
    sq, _ = _resid_pass(op, v, batch, want_grad=False)
    return 0.5 * scale * sq + 0.5 * lam * float((v.real ** 2 + v.imag ** 2).sum())


def hutchinson_update(
    state: PreconditionerState,
    op: DatasetOperator,
    z: np.ndarray,
    batch: np.ndarray,
    lam: float,
    n_total: int | None = None,
) -> PreconditionerState:
    """Fold one Rademacher sample into the running diagonal average.

    ``d_avg <- (k-1)/k d_avg + 1/k Re(z * Hz)`` with the mini-batch
    Hessian-vector product; the imaginary residue of ``z * Hz`` is
    estimator noise and is dropped.
    """
    hz = op.hvp(z, batch, lam, n_total)
    sample = z * hz.real
    state.k += 1
    state.d_avg *= (state.k - 1) / state.k
    state.d_avg += sample / state.k
    return state


def ema_and_threshold(
    state: PreconditionerState,
    beta: float,
    alpha: float,
    thresholded: bool = True,
) -> np.ndarray:
    """Advance the exponential average and return the applied preconditioner.

    ``d <- beta d + (1 - beta) d_avg``; the applied matrix is
    ``max(|d|, alpha)``, or ``max(|d|, 1e-12)`` when thresholding is
    disabled (ablation variant).
    """
    state.d *= beta
    state.d += (1.0 - beta) * state.d_avg
    floor = alpha if thresholded else NOTHRESH_FLOOR
    return np.maximum(np.abs(state.d), floor)


def threshold_alpha(stack: ImageStack, shells: ShellTable, lam: float) -> float:
    """Expected Hessian diagonal at the maximum Fourier radius.

    ``alpha = P_x(R)/P_v(R) * sum_i |C_i(R)|^2 + lam`` with ``R`` the mask
    radius; the CTF sum degenerates to ``N`` for CTF-free stacks.
    """
    r = stack.mask_radius
    if shells.max_radius != r:
        raise ValueError("shell table radius must match the stack mask radius")
    if shells.vx_count[r] == 0:
        raise ValueError(f"empty 3D shell at radius {r}")
    if stack.ctfs is None:
        csum = float(stack.n_images)
    else:
        r_max = stack.spec.half
        csum = float(sum(ctf_eval(c, r, r_max) ** 2 for c in stack.ctfs))
    return shells.shell_ratio(r) * csum + lam


def armijo_search(
    v: np.ndarray,
    grad: np.ndarray,
    dhat: np.ndarray,
    loss_fn,
    eta_in: float,
    c: float,
    f0: float | None = None,
):
    """Backtracking line search along the preconditioned descent direction.

    Starting from ``eta_in`` (carried over between iterations), halve the
    step until

        f(v - eta * dhat^-1 grad) <= f(v) - c * eta * ||grad||^2_{dhat^-1}

    holds on the current batch.  Returns ``(eta, v_next, f_next,
    backtracks)``.  More than 60 halvings raises NumericalError.
    """
    if eta_in <= 0:
        raise ValueError("eta_in must be positive")
    if f0 is None:
        f0 = loss_fn(v)
    direction = grad / dhat
    decrease = float(((grad.real ** 2 + grad.imag ** 2) / dhat).sum())
    if decrease == 0.0:
        return eta_in, v, f0, 0
    eta = float(eta_in)
    for backtracks in range(MAX_HALVINGS + 1):
        v_next = v - eta * direction
        f_next = loss_fn(v_next)
        if f_next <= f0 - c * eta * decrease:
            return eta, v_next, f_next, backtracks
        eta *= 0.5
    raise NumericalError(
        f"line search exceeded {MAX_HALVINGS} halvings "
        "(non-descent direction or numerical breakdown)"
    )


def run(
    config: OptimConfig,
    stack: ImageStack,
    v0: FourierVolume | None = None,
    reference: FourierVolume | None = None,
    exact_diag_vec: np.ndarray | None = None,
) -> tuple[FourierVolume, RunTrace]:
    """Run the configured SGD variant for the configured number of epochs.

    ``reference`` enables the per-epoch FSC trace; ``exact_diag_vec``
    enables the per-epoch relative error of the Hutchinson average (and is
    required by the ``precomputed`` variant, for which it is computed here
    when not supplied).
    """
    op = DatasetOperator(stack, config.mode)
    spec = op.spec
    shells = shell_table(spec, stack.mask_radius)
    alpha = threshold_alpha(stack, shells, config.lam)
    n = op.n_images
    if config.batch_size > n:
        raise ValueError("batch_size exceeds the number of images")

    v = (v0.values.copy() if v0 is not None
         else np.zeros(spec.n_voxels, dtype=np.complex128))

    estimating = config.variant in ("estimated", "estimated_nothresh")
    thresholded = config.variant != "estimated_nothresh"
    state = PreconditionerState.initial(spec.n_voxels, alpha)
    dhat_fixed = None
    if config.variant == "plain":
        dhat_fixed = np.ones(spec.n_voxels)
    elif config.variant == "precomputed":
        if exact_diag_vec is None:
            exact_diag_vec = exact_diag(
                stack.poses, stack.ctfs, config.lam, config.mode, spec, op.mask
            )
        dhat_fixed = np.maximum(exact_diag_vec, alpha)

    z_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(2,))
    )

    n_epochs = config.epochs
    trace = RunTrace(
        loss=np.empty(n_epochs),
        eta_end=np.empty(n_epochs),
        backtracks=np.zeros(n_epochs, dtype=np.int64),
        precond_rel_err=np.full(n_epochs, np.nan),
        fsc_history=(np.empty((n_epochs, shells.max_radius + 1))
                     if reference is not None else None),
        shell_radii=shells.radii.copy() if reference is not None else None,
    )

    eta = config.eta0
    all_idx = op.all_indices()
    dhat = dhat_fixed
    for epoch in range(n_epochs):
        for batch in epoch_batches(n, config.batch_size, config.seed, epoch):
            if estimating:
                z = rademacher(z_rng, spec.n_voxels)
                hutchinson_update(state, op, z, batch, config.lam)
                dhat = ema_and_threshold(state, config.beta, alpha, thresholded)
            f0, grad = loss_and_grad(op, v, batch, config.lam)
            eta, v, f_next, nbt = armijo_search(
                v, grad, dhat,
                lambda w: batch_loss(op, w, batch, config.lam),
                eta, config.c, f0=f0,
            )
            # Sufficient-decrease contract, re-checked exactly as accepted.
            decrease = float(((grad.real ** 2 + grad.imag ** 2) / dhat).sum())
            trace.armijo_steps += 1
            if not f_next <= f0 - config.c * eta * decrease:
                trace.armijo_violations += 1
            trace.accepted_etas.append(eta)
            trace.backtracks[epoch] += nbt
        eta *= config.eta_growth
        trace.loss[epoch] = batch_loss(op, v, all_idx, config.lam)
        trace.eta_end[epoch] = eta
        if estimating and exact_diag_vec is not None:
            trace.precond_rel_err[epoch] = relative_l2(state.d_avg, exact_diag_vec)
        if reference is not None:
            curve = fsc(FourierVolume(v.copy(), spec), reference, shells)
            trace.fsc_history[epoch] = curve.values
    trace.final_dhat = dhat
    return FourierVolume(v, spec), trace


def reference_solve(
    stack: ImageStack,
    lam: float,
    mode: str,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> FourierVolume:
    """Solve the normal equations ``H v = b`` with Jacobi-preconditioned CG.

    The returned volume satisfies ``||H v - b|| / ||b|| <= tol`` with the
    residual recomputed from scratch (not the CG recursion) before
    accepting; exceeding ``max_iter`` raises NumericalError.
    """
    if lam <= 0:
        raise ValueError("reference solve needs lam > 0 (positive definite H)")
    op = DatasetOperator(stack, mode)
    all_idx = op.all_indices()
    b = op.b_vector()
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return FourierVolume.zeros(op.spec)
    jacobi = exact_diag(stack.poses, stack.ctfs, lam, mode, op.spec, op.mask)

    def apply_h(w):
        return op.hvp(w, all_idx, lam)

    v = np.zeros(op.spec.n_voxels, dtype=np.complex128)
    r = b.copy()
    y = r / jacobi
    p = y.copy()
    rho = float(np.vdot(r, y).real)
    for _ in range(max_iter):
        hp = apply_h(p)
        denom = float(np.vdot(p, hp).real)
        if denom <= 0:
            raise NumericalError("CG breakdown: non-positive curvature")
        step = rho / denom
        v += step * p
        r -= step * hp
        if np.linalg.norm(r) <= tol * b_norm:
            # Certify with a residual recomputed from scratch; restart the
            # recursion from it if the drifted estimate was optimistic.
            r = b - apply_h(v)
            if np.linalg.norm(r) <= tol * b_norm:
                return FourierVolume(v, op.spec)
            y = r / jacobi
            p = y.copy()
            rho = float(np.vdot(r, y).real)
            continue
        y = r / jacobi
        rho_new = float(np.vdot(r, y).real)
        beta = rho_new / rho
        rho = rho_new
        p = y + beta * p
    raise NumericalError(f"CG did not reach tolerance {tol} in {max_iter} iterations")
