"""Fourier-domain tomographic reconstruction with estimated diagonal preconditioning."""

from .errors import ConfigError, DataError, NumericalError
from .forward import (
    CtfParams,
    DatasetOperator,
    FourierVolume,
    ImageStack,
    Pose,
    backproject,
    ctf_eval,
    gaussian_blob_phantom,
    project,
    sample_uniform_poses,
    synthesize_dataset,
)
from .grid import GridSpec, ShellTable, ball_mask, disk_mask, shell_table
from .hessian import (
    cond_lower_bound,
    condition_number,
    exact_diag,
    hit_counts,
    hvp,
)
from .metrics import FscCurve, epochs_to_threshold, fsc, grad_variance_shells, relative_l2
from .optim import (
    OptimConfig,
    PreconditionerState,
    RunTrace,
    armijo_search,
    ema_and_threshold,
    hutchinson_update,
    loss_and_grad,
    reference_solve,
    run,
    threshold_alpha,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "GridSpec",
    "ShellTable",
    "shell_table",
    "disk_mask",
    "ball_mask",
    "Pose",
    "CtfParams",
    "FourierVolume",
    "ImageStack",
    "DatasetOperator",
    "project",
    "backproject",
    "ctf_eval",
    "sample_uniform_poses",
    "synthesize_dataset",
    "gaussian_blob_phantom",
    "hit_counts",
    "exact_diag",
    "hvp",
    "condition_number",
    "cond_lower_bound",
    "FscCurve",
    "fsc",
    "relative_l2",
    "epochs_to_threshold",
    "grad_variance_shells",
    "OptimConfig",
    "PreconditionerState",
    "RunTrace",
    "loss_and_grad",
    "hutchinson_update",
    "ema_and_threshold",
    "threshold_alpha",
    "armijo_search",
    "run",
    "reference_solve",
    "__version__",
]
