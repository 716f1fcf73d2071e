"""Noisy-OR latent variable models with amortized, stochastic and conjugate-dual inference."""
from .errors import (CapacityError, ConfigError, ContractError, ConvergenceWarning, DomainError,
                     NorlabError, NumericalAbort)
from .kernels import BACKEND_NAME
from .model import BinaryDataset, BoundState, ModelParams

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME", "BinaryDataset", "BoundState", "CapacityError", "ConfigError",
    "ContractError", "ConvergenceWarning", "DomainError", "ModelParams", "NorlabError",
    "NumericalAbort",
]
