"""Incremental POD trajectory compression for inexact-gradient data assimilation."""

__version__ = "0.1.0"

from .errors import IpodaError
from .ipod_core import (
    IpodState,
    IpodTolerances,
    energy_ratio,
    error_bound,
    ipod_compress,
    ipod_finalize,
    ipod_init,
    ipod_update,
    reconstruct,
)
from .weighted_space import WeightOperator, core_weighted_svd, hs_norm_sq, weighted_inner, weighted_norm

__all__ = [
    "__version__",
    "IpodaError",
    "IpodState",
    "IpodTolerances",
    "WeightOperator",
    "core_weighted_svd",
    "energy_ratio",
    "error_bound",
    "hs_norm_sq",
    "ipod_compress",
    "ipod_finalize",
    "ipod_init",
    "ipod_update",
    "reconstruct",
    "weighted_inner",
    "weighted_norm",
]
