"""Federated multimodal recommendation simulator.

A client holds its own scoring head and fusion router; the server owns the
shared item embedding table and the fusion-strategy parameters. Rounds sample
clients, run local SGD, and aggregate weighted row deltas and accumulated
strategy gradients. Everything is deterministic under a master seed.
"""

from .errors import (
    AccumulationError,
    BadMagicError,
    FedmrError,
    MalformedLineError,
    NonFiniteError,
    RowCountMismatchError,
    ShapeError,
    TruncatedPayloadError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AccumulationError",
    "BadMagicError",
    "FedmrError",
    "MalformedLineError",
    "NonFiniteError",
    "RowCountMismatchError",
    "ShapeError",
    "TruncatedPayloadError",
    "ValidationError",
    "__version__",
]
