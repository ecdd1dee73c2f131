"""Federated-learning simulator for label-flipping attacks and gradient-clustering defenses."""

from lfshield.errors import (
    AggregationError,
    ConfigError,
    ContractError,
    FormatError,
    LFShieldError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationError",
    "ConfigError",
    "ContractError",
    "FormatError",
    "LFShieldError",
    "ShapeError",
    "__version__",
]
