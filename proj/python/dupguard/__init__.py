"""Python bindings for the dupguard core."""

from ._dupguard import (
    DupGuardError,
    auc,
    derive_seed,
    detect,
    fit_detector,
    mahalanobis,
    read_trajectories,
    run_cli,
    singular_values,
    ss_score,
    write_trajectories,
)

__all__ = [
    "DupGuardError",
    "auc",
    "derive_seed",
    "detect",
    "fit_detector",
    "mahalanobis",
    "read_trajectories",
    "run_cli",
    "singular_values",
    "ss_score",
    "write_trajectories",
]
