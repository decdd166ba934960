"""Flat key=value experiment configuration shared by all CLI subcommands.

A config file holds ``key = value`` lines (``#`` comments and blank lines
allowed); every key can also be overridden by a CLI flag of the same name.
Unknown keys are rejected and all values are range-checked at parse time.

Two keys have resolution rules:

* ``mask_radius = -1`` resolves to the largest rotation-safe radius
  ``floor(M/2) - 1``;
* ``lambda = -1`` resolves to the scale-aware heuristic
  ``1e-3 * N * P_x(R) / P_v(R)`` at the mask radius;
* ``snr > 0`` makes synthesis derive ``sigma`` from the measured clean
  signal power so the per-pixel SNR matches.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .grid import GridSpec, shell_table
from .optim import OptimConfig, VARIANTS

__all__ = ["ExperimentConfig", "parse_config_file", "build_config", "CONFIG_KEYS"]

# config-file/CLI key -> dataclass field ("lambda" is a Python keyword)
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_ALIASES.items()}


@dataclass
class ExperimentConfig:
    # dataset
    M: int = 48
    N: int = 5000
    mask_radius: int = -1
    sigma: float = 0.0
    snr: float = 0.5
    shift_bound: float = 1.5
    pose_concentration: float = 4.0
    use_ctf: bool = True
    defocus_min: float = 0.8
    defocus_max: float = 2.2
    amp_contrast: float = 0.85
    b_factor: float = 3.0
    phantom_seed: int = 7
    phantom_blobs: int = 8
    # optimizer
    lam: float = -1.0
    batch_size: int = 500
    epochs: int = 20
    beta: float = 0.9
    c: float = 0.5
    eta0: float = 1.0
    eta_growth: float = 1.0
    variant: str = "estimated"
    seed: int = 1234
    mode: str = "tri"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.M < 4:
            raise ConfigError("M must be >= 4")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        max_r = self.M // 2 - 1
        if self.mask_radius != -1 and not 1 <= self.mask_radius <= max_r:
            raise ConfigError(
                f"mask_radius must be -1 (auto) or in [1, {max_r}] for M={self.M}"
            )
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.snr < 0:
            raise ConfigError("snr must be non-negative (0 disables)")
        if self.shift_bound < 0:
            raise ConfigError("shift_bound must be non-negative")
        if self.pose_concentration < 0:
            raise ConfigError("pose_concentration must be non-negative")
        if self.defocus_min > self.defocus_max:
            raise ConfigError("defocus_min must not exceed defocus_max")
        if not 0.0 < self.amp_contrast < 1.0:
            raise ConfigError("amp_contrast must lie in (0, 1)")
        if self.b_factor < 0:
            raise ConfigError("b_factor must be non-negative")
        if self.phantom_blobs < 1:
            raise ConfigError("phantom_blobs must be >= 1")
        if self.lam != -1.0 and self.lam < 0:
            raise ConfigError("lambda must be -1 (auto) or non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batch_size > self.N:
            raise ConfigError("batch_size must not exceed N")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        if not 0.0 < self.c < 1.0:
            raise ConfigError("c must lie in (0, 1)")
        if self.eta0 <= 0:
            raise ConfigError("eta0 must be positive")
        if self.eta_growth < 1.0:
            raise ConfigError("eta_growth must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.mode not in ("nn", "tri"):
            raise ConfigError("mode must be 'nn' or 'tri'")

    # -- resolution ---------------------------------------------------------

    def grid_spec(self) -> GridSpec:
        return GridSpec(self.M)

    def mask_radius_value(self) -> int:
        return self.M // 2 - 1 if self.mask_radius == -1 else self.mask_radius

    def lambda_value(self) -> float:
        if self.lam != -1.0:
            return self.lam
        r = self.mask_radius_value()
        shells = shell_table(self.grid_spec(), r)
        return 1e-3 * self.N * shells.shell_ratio(r)

    def optim_config(self, variant: str | None = None) -> OptimConfig:
        return OptimConfig(
            lam=self.lambda_value(),
            batch_size=self.batch_size,
            epochs=self.epochs,
            beta=self.beta,
            c=self.c,
            eta0=self.eta0,
            variant=variant or self.variant,
            seed=self.seed,
            mode=self.mode,
            eta_growth=self.eta_growth,
        )

    def to_key_values(self) -> dict[str, str]:
        """Config as file-format key/value strings, in declaration order."""
        out = {}
        for f in fields(self):
            key = _FIELD_TO_KEY.get(f.name, f.name)
            val = getattr(self, f.name)
            if isinstance(val, bool):
                out[key] = "true" if val else "false"
            elif isinstance(val, float):
                out[key] = repr(val)
            else:
                out[key] = str(val)
        return out


CONFIG_KEYS = tuple(
    _FIELD_TO_KEY.get(f.name, f.name) for f in fields(ExperimentConfig)
)
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, field: str, raw: str):
    kind = _FIELD_TYPES[field]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_file(path) -> dict[str, str]:
    """Read raw key/value strings from a flat config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def build_config(
    file_values: dict[str, str] | None = None,
    overrides: dict[str, str] | None = None,
) -> ExperimentConfig:
    """Defaults, then config-file values, then CLI overrides."""
    merged: dict[str, object] = {}
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key: {key}")
            field = _KEY_ALIASES.get(key, key)
            merged[field] = _coerce(key, field, str(raw))
    return ExperimentConfig(**merged)


def write_config_file(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    lines = [f"{k} = {v}" for k, v in config.to_key_values().items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
