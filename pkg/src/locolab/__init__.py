"""Posterior-mean Jacobians of diffusion models on a mixture of low-rank
Gaussians, and masked Jacobian editing built on them."""

from .errors import (CapacityError, ConfigError, DegenerateDirectionError, DomainError,
                     LocoError, ModelError)
from .schedule import COSINE, LINEAR, NoiseSchedule
from .molrg import SubspaceModel, localized_model, random_model

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "DegenerateDirectionError", "DomainError",
    "LocoError", "ModelError", "COSINE", "LINEAR", "NoiseSchedule",
    "SubspaceModel", "localized_model", "random_model",
]
