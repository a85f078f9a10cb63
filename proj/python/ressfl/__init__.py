"""Split federated learning simulator with model-inversion attacks and defenses."""

from ._core import (
    RESISTANCE_TARGET,
    ConfigError,
    IoError,
    NumericError,
    ShapeError,
    distance_correlation,
    inversion_flops,
    mse,
    perturb,
    psnr,
    resolved_config,
    run,
    ssim,
    synth_dataset,
)

__all__ = [
    "RESISTANCE_TARGET",
    "ConfigError",
    "IoError",
    "NumericError",
    "ShapeError",
    "distance_correlation",
    "inversion_flops",
    "mse",
    "perturb",
    "psnr",
    "resolved_config",
    "run",
    "ssim",
    "synth_dataset",
]
