"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FedWindError(Exception):
    """Base class for all package errors."""


class ShapeError(FedWindError, ValueError):
    pass


class DomainError(FedWindError, ValueError):
    pass


class NumericError(FedWindError, ArithmeticError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class ConfigError(FedWindError, ValueError):
    pass


class DataError(FedWindError, ValueError):
    pass


class DegenerateFeatureError(DataError):
    pass


class ClientSkip(FedWindError):
    """Raised by a client that has nothing to train on this round."""

    def __init__(self, client_id, reason: str = "empty training set"):
        super().__init__(f"client {client_id}: {reason}")
        self.client_id = client_id


class ProtocolError(FedWindError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class RoundAborted(ProtocolError):
    def __init__(self, client_id, round_index: int, reason: str):
        super().__init__(f"round {round_index} aborted by client {client_id}: {reason}")
        self.client_id = client_id
        self.round_index = round_index
        self.reason = reason
