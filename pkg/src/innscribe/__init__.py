"""Directly invertible coupling-layer networks for framewise transcription."""

from .coupling import CouplingLayer, Subnet, cexp
from .model import DimSpec, InnModel
from .numerics import Permutation, RngState
from .objective import LossBreakdown, LossWeights
from .swd import SwdConfig, exact_w2sq_1d, swd, swd_grad

__version__ = "0.1.0"

__all__ = [
    "CouplingLayer", "Subnet", "cexp",
    "DimSpec", "InnModel",
    "Permutation", "RngState",
    "LossBreakdown", "LossWeights",
    "SwdConfig", "exact_w2sq_1d", "swd", "swd_grad",
    "__version__",
]
