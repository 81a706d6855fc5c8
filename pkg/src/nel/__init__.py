"""Noisy-image edge lab.

From-scratch building blocks for faint-edge detection and edge-preserving
denoising: a rank-4 autodiff engine, a configurable U-Net, classical filter
baselines, synthetic data generation, strict evaluation metrics and a
deterministic trainer, all on plain NumPy.
"""

from . import autodiff, datagen, filters, losses, metrics, pgm, trainer, unet
from .errors import (
    CompatibilityError,
    ContractError,
    DataFormatError,
    DimensionError,
    DTypeError,
    GeometryError,
    GraphStateError,
    NelError,
    TrainingDiverged,
)

__all__ = [
    "autodiff",
    "datagen",
    "filters",
    "losses",
    "metrics",
    "pgm",
    "trainer",
    "unet",
    "NelError",
    "DimensionError",
    "GeometryError",
    "DTypeError",
    "GraphStateError",
    "ContractError",
    "DataFormatError",
    "CompatibilityError",
    "TrainingDiverged",
]

__version__ = "0.1.0"
