"""Run configuration: one INI-style file with sections, overridable by CLI
flags, driving fully reproducible runs."""

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .inla import FitOptions, HyperParams
from .model import ModelSpec, SpatialDiscretization, TemporalDiscretization
from .synthetic import SyntheticSettings, generate_synthetic


class ConfigError(ValueError):
    """Invalid, inconsistent or missing configuration."""


@dataclass
class RunConfig:
    # model
    n_processes: int = 1
    n_spatial: int = 10
    n_time: int = 5
    n_fixed: int = 1
    synthetic: bool = True
    observations_per_process: int = 50
    spacing: float = 1.0
    time_step: float = 1.0
    fixed_effect_precision: float = 1e-3
    calibrate_variance: bool = False
    model_files: dict = field(default_factory=dict)
    # hyperparameters
    theta0: np.ndarray = None
    theta_true: np.ndarray = None
    prior_mean: np.ndarray = None
    prior_sd: float = 10.0
    # optimizer
    grad_step: float = 1e-3
    hess_step: float = 1e-2
    gtol: float = 1e-3
    ftol: float = 1e-6
    max_iter: int = 100
    # parallel
    workers: int = 1
    partitions: int = 1
    lb: float = 1.0
    # benchmark
    bench_n_blocks: int = 32
    bench_block_size: int = 4
    bench_arrow_size: int = 4
    bench_partitions: tuple = (1, 2, 3, 4)
    bench_lb_values: tuple = (1.0, 1.6)
    # run
    out_dir: str = "stinla-out"
    seed: int = 1

    @property
    def theta_dim(self):
        return HyperParams.dim_for(self.n_processes)

    def fit_options(self):
        return FitOptions(
            grad_step=self.grad_step,
            hess_step=self.hess_step,
            gtol=self.gtol,
            ftol=self.ftol,
            max_iter=self.max_iter,
            prior_sd=self.prior_sd,
            prior_mean=self.prior_mean,
        )


def _vector(raw):
    try:
        return np.array([float(part) for part in raw.replace(",", " ").split()])
    except ValueError as err:
        raise ConfigError(f"cannot parse vector from {raw!r}") from err


_PARSERS = {
    "model": {
        "n_processes": ("n_processes", int),
        "n_spatial": ("n_spatial", int),
        "n_time": ("n_time", int),
        "n_fixed": ("n_fixed", int),
        "synthetic": ("synthetic", lambda raw: raw.strip().lower() in ("1", "true", "yes")),
        "observations_per_process": ("observations_per_process", int),
        "spacing": ("spacing", float),
        "time_step": ("time_step", float),
        "fixed_effect_precision": ("fixed_effect_precision", float),
        "calibrate_variance": (
            "calibrate_variance",
            lambda raw: raw.strip().lower() in ("1", "true", "yes"),
        ),
    },
    "theta": {
        "theta0": ("theta0", _vector),
        "theta_true": ("theta_true", _vector),
        "prior_mean": ("prior_mean", _vector),
        "prior_sd": ("prior_sd", float),
    },
    "optimizer": {
        "grad_step": ("grad_step", float),
        "hess_step": ("hess_step", float),
        "gtol": ("gtol", float),
        "ftol": ("ftol", float),
        "max_iter": ("max_iter", int),
    },
    "parallel": {
        "workers": ("workers", int),
        "partitions": ("partitions", int),
        "lb": ("lb", float),
    },
    "benchmark": {
        "n_blocks": ("bench_n_blocks", int),
        "block_size": ("bench_block_size", int),
        "arrow_size": ("bench_arrow_size", int),
        "partitions": ("bench_partitions", lambda raw: tuple(int(v) for v in _vector(raw))),
        "lb_values": ("bench_lb_values", lambda raw: tuple(float(v) for v in _vector(raw))),
    },
    "output": {"out_dir": ("out_dir", str)},
    "run": {"seed": ("seed", int)},
}

_FILE_KEYS = (
    "spatial_mass",
    "spatial_stiffness",
    "temporal_mass",
    "temporal_coupling",
    "temporal_stiffness",
    "design",
    "observations",
)


def load_config(path=None, overrides=None):
    """Parse the config file and apply CLI overrides (flat attribute names)."""
    config = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"config file not found: {path}")
        base = Path(path).parent
        for section in parser.sections():
            if section not in _PARSERS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if section == "model" and (
                    key in _FILE_KEYS or any(key.startswith(f"{k}_") for k in _FILE_KEYS)
                ):
                    # file paths resolve relative to the config file
                    config.model_files[key] = str(base / raw.strip())
                    continue
                if key not in _PARSERS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                attr, cast = _PARSERS[section][key]
                try:
                    setattr(config, attr, cast(raw))
                except ConfigError:
                    raise
                except ValueError as err:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from err
    for attr, value in (overrides or {}).items():
        if value is not None:
            setattr(config, attr, value)
    _check(config)
    return config


def _check(config):
    if min(config.n_processes, config.n_spatial, config.n_time) < 1 or config.n_fixed < 0:
        raise ConfigError("model dimensions must be positive (n_fixed >= 0)")
    if config.workers < 1 or config.partitions < 1:
        raise ConfigError("worker and partition counts must be positive")
    if config.partitions > 1 and config.n_time < 2 * config.partitions:
        raise ConfigError(
            f"{config.partitions} partitions require n_time >= "
            f"{2 * config.partitions}, got {config.n_time}"
        )
    if config.lb < 1.0:
        raise ConfigError("load-balance factor must be >= 1")
    dim = config.theta_dim
    for name in ("theta0", "theta_true", "prior_mean"):
        vec = getattr(config, name)
        if vec is not None and vec.size != dim:
            raise ConfigError(f"{name} must have {dim} entries, got {vec.size}")
    if not config.synthetic:
        missing = [
            key
            for key in ("spatial_mass", "spatial_stiffness", "temporal_mass",
                        "temporal_coupling", "temporal_stiffness")
            if not _file_entries(config, key)
        ]
        if missing:
            raise ConfigError(f"file-based model is missing: {', '.join(missing)}")
        for key, raw in config.model_files.items():
            if not Path(raw).exists():
                raise ConfigError(f"referenced file does not exist: {raw}")


def _file_entries(config, key):
    """Per-process file paths for one model input (shared or suffixed)."""
    if key in config.model_files:
        return [config.model_files[key]] * config.n_processes
    paths = []
    for i in range(config.n_processes):
        suffixed = f"{key}_{i}"
        if suffixed not in config.model_files:
            return []
        paths.append(config.model_files[suffixed])
    return paths


def theta_start(config):
    if config.theta0 is not None:
        return config.theta0.copy()
    return np.zeros(config.theta_dim)


def build_model(config):
    """Materialize the model: synthetic generation or file ingestion.

    Returns ``(spec, latent_true-or-None)``.
    """
    if config.synthetic:
        theta_true = (
            config.theta_true if config.theta_true is not None else theta_start(config)
        )
        settings = SyntheticSettings(
            n_processes=config.n_processes,
            n_spatial=config.n_spatial,
            n_time=config.n_time,
            n_fixed=config.n_fixed,
            observations_per_process=config.observations_per_process,
            spacing=config.spacing,
            time_step=config.time_step,
            fixed_effect_precision=config.fixed_effect_precision,
        )
        data = generate_synthetic(settings, theta_true, config.seed)
        return data.spec, data.latent_true

    spatial = [
        SpatialDiscretization(mass=dataio.read_sparse(m), stiffness=dataio.read_sparse(g))
        for m, g in zip(
            _file_entries(config, "spatial_mass"),
            _file_entries(config, "spatial_stiffness"),
        )
    ]
    temporal = [
        TemporalDiscretization(
            mass=dataio.read_sparse(m0),
            coupling=dataio.read_sparse(m1),
            stiffness=dataio.read_sparse(m2),
        )
        for m0, m1, m2 in zip(
            _file_entries(config, "temporal_mass"),
            _file_entries(config, "temporal_coupling"),
            _file_entries(config, "temporal_stiffness"),
        )
    ]
    design_paths = _file_entries(config, "design")
    obs_paths = _file_entries(config, "observations")
    design = [dataio.read_sparse(p) for p in design_paths] if design_paths else []
    observations = [dataio.read_vector(p) for p in obs_paths] if obs_paths else []
    if design and not observations:
        raise ConfigError("designs given without observations")
    spec = ModelSpec(
        n_processes=config.n_processes,
        n_spatial=config.n_spatial,
        n_time=config.n_time,
        n_fixed=config.n_fixed,
        spatial=spatial,
        temporal=temporal,
        design=design,
        observations=observations,
        fixed_effect_precision=config.fixed_effect_precision,
    )
    try:
        spec.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return spec, None
