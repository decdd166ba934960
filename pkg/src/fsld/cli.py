"""Command-line driver: synth | analyze | reconstruct | evaluate | all.

Every subcommand reads the flat config (defaults, then ``--config`` file,
then per-key flags), runs one pipeline stage, and writes CSV / container
files.  ``all`` chains the full experiment: dataset synthesis, condition
analysis, reference solve, the four reconstruction variants, and the
evaluation tables.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import CONFIG_KEYS, ExperimentConfig, build_config, parse_config_file, write_config_file
from .errors import ConfigError, DataError, NumericalError
from .forward import (
    CtfParams,
    DatasetOperator,
    FourierVolume,
    ImageStack,
    gaussian_blob_phantom,
    sample_preferred_poses,
    sample_uniform_poses,
    synthesize_dataset,
)
from .grid import disk_mask, shell_table
from .hessian import condition_report, exact_diag, hit_counts
from .io import file_digest, read_dataset, read_volume, write_dataset, write_volume
from .metrics import epochs_to_threshold, fsc, grad_variance_shells
from .optim import VARIANTS, reference_solve, run

ALL_VARIANTS = list(VARIANTS)


# ---------------------------------------------------------------------------
# formatting helpers


def _fmt(value) -> str:
    """Locale-independent CSV cell: shortest round-trip for floats."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty CSV")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:] if line]


# ---------------------------------------------------------------------------
# dataset construction


def sample_ctfs(config: ExperimentConfig) -> list[CtfParams] | None:
    """Per-image CTFs with defocus uniform in the configured bounds."""
    if not config.use_ctf:
        return None
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(101,))
    )
    defoci = rng.uniform(config.defocus_min, config.defocus_max, size=config.N)
    return [
        CtfParams(defocus=float(d), amp_contrast=config.amp_contrast,
                  b_factor=config.b_factor)
        for d in defoci
    ]


def build_stack(config: ExperimentConfig) -> tuple[ImageStack, FourierVolume]:
    """Phantom, poses, CTFs, noise: the full synthetic dataset of a config.

    With ``snr > 0`` the noise level is derived from the measured clean
    signal power so the per-pixel SNR over masked pixels matches.
    """
    spec = config.grid_spec()
    radius = config.mask_radius_value()
    truth = gaussian_blob_phantom(spec, config.phantom_blobs, config.phantom_seed)
    poses = sample_preferred_poses(config.N, config.shift_bound, config.seed,
                                   config.pose_concentration)
    ctfs = sample_ctfs(config)
    sigma = config.sigma
    if config.snr > 0:
        clean = synthesize_dataset(truth, poses, ctfs, 0.0, config.mode,
                                   radius, config.seed)
        mask = disk_mask(spec, radius)
        power = float(np.mean(np.abs(clean.images[:, mask]) ** 2))
        sigma = float(np.sqrt(power / config.snr))
    stack = synthesize_dataset(truth, poses, ctfs, sigma, config.mode,
                               radius, config.seed)
    return stack, truth


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(config: ExperimentConfig, out_path) -> Path:
    out_path = Path(out_path)
    stack, truth = build_stack(config)
    write_dataset(stack, out_path)
    write_volume(truth, out_path.with_name(out_path.stem + "_truth.fsv"))
    print(f"{file_digest(out_path)}  {out_path}")
    return out_path


def cmd_analyze(dataset_path, out_csv, config: ExperimentConfig,
                replicates: int = 0) -> Path:
    """Condition-number report (per radius) plus diagonal slice volumes."""
    stack = read_dataset(dataset_path)
    spec = stack.spec
    lam = config.lambda_value()
    mask = disk_mask(spec, stack.mask_radius)
    radii = np.arange(1, stack.mask_radius + 1)
    out_csv = Path(out_csv)

    report = condition_report(stack.poses, stack.ctfs, lam, spec, mask, radii)
    counts = hit_counts(stack.poses, spec, mask)
    write_volume(
        FourierVolume((counts + lam).astype(np.complex128), spec),
        out_csv.with_name(out_csv.stem + "_diag_noctf.fsv"),
    )
    if stack.ctfs is not None:
        diag_ctf = exact_diag(stack.poses, stack.ctfs, lam, "nn", spec, mask)
        write_volume(
            FourierVolume(diag_ctf.astype(np.complex128), spec),
            out_csv.with_name(out_csv.stem + "_diag_ctf.fsv"),
        )

    if replicates <= 0:
        rows = zip(
            report["radius"], report["kappa_measured_noctf"],
            report["kappa_measured_ctf"], report["lower_bound"],
            report["one_over_lambda"],
        )
        return write_csv(
            out_csv,
            ["radius", "kappa_measured_noctf", "kappa_measured_ctf",
             "lower_bound", "one_over_lambda"],
            rows,
        )

    # Replicate protocol: fresh uniform pose sets, min/mean/max per radius.
    kappas = np.empty((replicates, radii.size))
    for rep in range(replicates):
        seed = int(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(102, rep))
            .generate_state(1)[0]
        )
        poses = sample_uniform_poses(stack.n_images, 0.0, seed)
        rep_report = condition_report(poses, None, lam, spec, mask, radii)
        kappas[rep] = rep_report["kappa_measured_noctf"]
    rows = zip(
        report["radius"], kappas.min(axis=0), kappas.mean(axis=0),
        kappas.max(axis=0), report["lower_bound"], report["one_over_lambda"],
    )
    return write_csv(
        out_csv,
        ["radius", "kappa_min", "kappa_mean", "kappa_max",
         "lower_bound", "one_over_lambda"],
        rows,
    )


def _write_trace(trace, out_trace: Path) -> None:
    rows = []
    for e in range(trace.loss.size):
        rows.append([e, trace.loss[e], trace.eta_end[e], trace.backtracks[e],
                     trace.precond_rel_err[e]])
    write_csv(out_trace, ["epoch", "loss", "eta", "backtracks", "precond_rel_err"],
              rows)
    if trace.fsc_history is not None:
        header = ["epoch"] + [f"shell_{int(r)}" for r in trace.shell_radii]
        rows = [[e, *trace.fsc_history[e]] for e in range(trace.loss.size)]
        write_csv(out_trace.with_name(out_trace.stem + "_fsc.csv"), header, rows)


def cmd_reconstruct(dataset_path, config: ExperimentConfig, variant: str,
                    out_volume, out_trace, reference_path=None):
    stack = read_dataset(dataset_path)
    cfg = config.optim_config(variant)
    reference = read_volume(reference_path) if reference_path else None
    exact_vec = None
    if variant in ("estimated", "estimated_nothresh"):
        op = DatasetOperator(stack, cfg.mode)
        exact_vec = exact_diag(stack.poses, stack.ctfs, cfg.lam, cfg.mode,
                               stack.spec, op.mask)
    volume, trace = run(cfg, stack, reference=reference, exact_diag_vec=exact_vec)
    write_volume(volume, out_volume)
    _write_trace(trace, Path(out_trace))
    print(f"{variant}: final loss {_fmt(trace.loss[-1])}, "
          f"{trace.armijo_violations} line-search violations")
    return volume, trace


def _evaluate_volumes(path_a, path_b, out_csv) -> Path:
    va = read_volume(path_a)
    vb = read_volume(path_b)
    if va.spec != vb.spec:
        raise DataError(
            f"grid mismatch: {path_a} has M={va.spec.M}, {path_b} has M={vb.spec.M}"
        )
    shells = shell_table(va.spec, va.spec.max_mask_radius)
    curve = fsc(va, vb, shells)
    rows = [
        [int(r), int(r), curve.values[i]]
        for i, r in enumerate(curve.radii)
    ]
    return write_csv(out_csv, ["shell", "radius", "fsc"], rows)


def _evaluate_history(trace_dir, out_csv) -> Path:
    """Epochs-to-threshold tables from the fsc_<variant>.csv histories."""
    trace_dir = Path(trace_dir)
    histories = {}
    for variant in ALL_VARIANTS:
        path = trace_dir / f"trace_{variant}_fsc.csv"
        if not path.exists():
            continue
        header, rows = read_csv(path)
        values = np.array([[float(c) for c in row[1:]] for row in rows])
        histories[variant] = values
    if not histories:
        raise DataError(f"{trace_dir}: no trace_<variant>_fsc.csv files found")
    n_shells = next(iter(histories.values())).shape[1]
    out_csv = Path(out_csv)
    written = []
    for theta, tag in ((0.5, "theta05"), (0.8, "theta08")):
        cols = {v: epochs_to_threshold(h, theta) for v, h in histories.items()}
        header = ["shell"] + [f"epochs_{v}" for v in cols]
        rows = [[s, *[cols[v][s] for v in cols]] for s in range(n_shells)]
        written.append(
            write_csv(out_csv.with_name(f"{out_csv.stem}_{tag}.csv"), header, rows)
        )
    return written[0]


def _check_noiseless(dataset_path, volume_path) -> None:
    stack = read_dataset(dataset_path)
    truth = read_volume(volume_path)
    if truth.spec != stack.spec:
        raise DataError("grid mismatch between dataset and volume")
    if stack.sigma != 0:
        raise DataError(f"dataset has sigma={stack.sigma}, not noiseless")
    clean = synthesize_dataset(truth, stack.poses, stack.ctfs, 0.0, stack.mode,
                               stack.mask_radius, stack.seed)
    if not np.array_equal(clean.images, stack.images):
        raise DataError("images do not equal the projections of the volume")
    print("noiseless check: OK")


def cmd_all(config: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_file(config, out_dir / "config_used.cfg")

    data_path = cmd_synth(config, out_dir / "data.fsd")
    cmd_analyze(data_path, out_dir / "cond.csv", config)

    lam = config.lambda_value()
    stack = read_dataset(data_path)
    reference = reference_solve(stack, lam, config.mode)
    write_volume(reference, out_dir / "reference.fsv")
    print("reference solve done")

    shells = shell_table(stack.spec, stack.mask_radius)
    variance_cols: dict[str, np.ndarray] = {}
    for variant in ALL_VARIANTS:
        volume, trace = cmd_reconstruct(
            data_path, config, variant,
            out_dir / f"vol_{variant}.fsv",
            out_dir / f"trace_{variant}.csv",
            reference_path=out_dir / "reference.fsv",
        )
        _evaluate_volumes(out_dir / f"vol_{variant}.fsv", out_dir / "reference.fsv",
                          out_dir / f"fsc_final_{variant}.csv")
        if variant in ("estimated", "estimated_nothresh"):
            op = DatasetOperator(stack, config.mode)
            var_shells, dinv = grad_variance_shells(
                op, volume.values, shells, config.optim_config(variant),
                precond=trace.final_dhat,
            )
            variance_cols[f"var_{variant}"] = var_shells
            variance_cols[f"dinv_{variant}"] = dinv
    if variance_cols:
        header = ["shell"] + list(variance_cols)
        rows = [
            [s, *[variance_cols[k][s] for k in variance_cols]]
            for s in range(shells.max_radius + 1)
        ]
        write_csv(out_dir / "variance.csv", header, rows)

    _evaluate_history(out_dir, out_dir / "epochs.csv")
    print(f"all outputs in {out_dir}")
    return out_dir


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="key=value config file")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (env FSLD_THREADS as fallback)")
    for key in CONFIG_KEYS:
        if key == "seed":
            parser.add_argument("--seed", dest="opt_seed", metavar="INT")
        elif key == "variant":
            parser.add_argument("--variant", dest="opt_variant",
                                choices=ALL_VARIANTS)
        else:
            parser.add_argument(f"--{key}", dest=f"opt_{key}", metavar="VAL")


def _config_from_args(args) -> ExperimentConfig:
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {}
    for key in CONFIG_KEYS:
        val = getattr(args, f"opt_{key}", None)
        if val is not None:
            overrides[key] = val
    return build_config(file_values, overrides)


def _apply_threads(args) -> None:
    threads = args.threads
    if threads is None:
        env = os.environ.get("FSLD_THREADS")
        if env is not None:
            try:
                threads = int(env)
            except ValueError as exc:
                raise ConfigError(f"bad FSLD_THREADS value: {env!r}") from exc
    if threads is None:
        return
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsld",
        description="Fourier-domain reconstruction with estimated diagonal preconditioning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, metavar="PATH")
    _add_common(p)

    p = sub.add_parser("analyze", help="condition-number report for a dataset")
    p.add_argument("dataset", metavar="DATASET")
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--replicates", type=int, default=0,
                   help="extra uniform pose sets for min/mean/max kappa")
    _add_common(p)

    p = sub.add_parser("reconstruct", help="run one SGD variant")
    p.add_argument("dataset", metavar="DATASET")
    p.add_argument("--out", required=True, metavar="VOLUME")
    p.add_argument("--trace", required=True, metavar="CSV")
    p.add_argument("--reference", metavar="VOLUME",
                   help="reference volume for the per-epoch FSC trace")
    _add_common(p)

    p = sub.add_parser("evaluate", help="FSC between two volumes, or trace tables")
    p.add_argument("paths", nargs="*", metavar="PATH")
    p.add_argument("--out", metavar="CSV")
    p.add_argument("--history", metavar="DIR",
                   help="emit epochs-to-threshold tables from a trace directory")
    p.add_argument("--check-noiseless", action="store_true",
                   help="verify DATASET VOLUME: images equal clean projections")
    _add_common(p)

    p = sub.add_parser("all", help="full pipeline into an output directory")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_common(p)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args)
        config = _config_from_args(args)
        if args.command == "synth":
            cmd_synth(config, args.out)
        elif args.command == "analyze":
            cmd_analyze(args.dataset, args.out, config, args.replicates)
        elif args.command == "reconstruct":
            cmd_reconstruct(args.dataset, config, config.variant, args.out,
                            args.trace, args.reference)
        elif args.command == "evaluate":
            if args.check_noiseless:
                if len(args.paths) != 2:
                    raise ConfigError("--check-noiseless needs DATASET VOLUME")
                _check_noiseless(args.paths[0], args.paths[1])
            elif args.history:
                if not args.out:
                    raise ConfigError("evaluate --history needs --out")
                _evaluate_history(args.history, args.out)
            else:
                if len(args.paths) != 2 or not args.out:
                    raise ConfigError("evaluate needs VOLUME_A VOLUME_B and --out")
                _evaluate_volumes(args.paths[0], args.paths[1], args.out)
        elif args.command == "all":
            cmd_all(config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
