"""Gaussian-process strain-energy surrogates with convexity constraints and sigma-point FE propagation."""
from .exceptions import (
    ContractError,
    ConvergenceError,
    DomainError,
    ExtrapolationError,
    GPSEDFError,
    NumericalError,
    ParseError,
    TrainingError,
)
from .gp_exact import ExactGPRegressor
from .gp_variational import ConvexGPRegressor, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "ConvergenceError",
    "DomainError",
    "ExtrapolationError",
    "GPSEDFError",
    "NumericalError",
    "ParseError",
    "TrainingError",
    "ExactGPRegressor",
    "ConvexGPRegressor",
    "TrainConfig",
]
