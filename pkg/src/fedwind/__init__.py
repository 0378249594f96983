"""Federated normal-behaviour models for wind turbine SCADA data.

Local training (strategy A), FedAvg (B) and per-client finetuning of the
federated model (C), with a small binary protocol to run B over TCP.
"""

from .errors import (
    ClientSkip,
    ConfigError,
    DataError,
    DegenerateFeatureError,
    DomainError,
    FedWindError,
    NumericError,
    ProtocolError,
    RoundAborted,
    ShapeError,
)
from .nn import BEARING_TEMP_ARCH, POWER_CURVE_ARCH, Architecture, ModelParams

__version__ = "0.1.0"

__all__ = [
    "Architecture", "ModelParams", "POWER_CURVE_ARCH", "BEARING_TEMP_ARCH",
    "FedWindError", "ShapeError", "DomainError", "NumericError", "ConfigError", "DataError",
    "DegenerateFeatureError", "ClientSkip", "ProtocolError", "RoundAborted", "__version__",
]
