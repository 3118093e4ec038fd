"""Equivariant flow-based sampling of periodic particle systems.

The package covers the full loop: Metropolis reference data on the flat
torus, geodesic-interpolant training of an equivariant graph velocity field,
exact-likelihood transport of uniform base draws, and self-normalized
importance-sampling estimators with reference plots.
"""

from .configuration import (
    Configuration,
    Dataset,
    GroupAction,
    SystemSpec,
    apply_action,
    compose_actions,
    identity_action,
    invert_action,
    ipl_system,
    kob_andersen_system,
    random_action,
    read_dataset,
    write_dataset,
)
from .geometry import (
    geodesic_interp,
    pairwise_distance,
    pairwise_log,
    torus_distance,
    torus_exp,
    torus_log,
    wrap,
)
from .velocity_net import GnnConfig, TorusGnn, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Configuration",
    "Dataset",
    "GnnConfig",
    "GroupAction",
    "SystemSpec",
    "TorusGnn",
    "apply_action",
    "compose_actions",
    "geodesic_interp",
    "identity_action",
    "invert_action",
    "ipl_system",
    "kob_andersen_system",
    "load_checkpoint",
    "pairwise_distance",
    "pairwise_log",
    "random_action",
    "read_dataset",
    "save_checkpoint",
    "torus_distance",
    "torus_exp",
    "torus_log",
    "wrap",
    "write_dataset",
    "__version__",
]
