"""Feed-forward networks from scratch and three physical-layer case studies."""

from phylearn.errors import (
    InvalidParameterError,
    NumericDegeneracyError,
    ParseError,
    ShapeError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "InvalidParameterError",
    "NumericDegeneracyError",
    "ParseError",
    "ShapeError",
    "TrainingDivergedError",
]
