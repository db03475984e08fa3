"""Federated learning simulator with contextual (bound-optimal) model aggregation."""

from ctxfed.errors import (
    AggregationError,
    DegenerateError,
    DivergedError,
    IdxParseError,
    InvalidInputError,
    SpecError,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationError",
    "DegenerateError",
    "DivergedError",
    "IdxParseError",
    "InvalidInputError",
    "SpecError",
]
