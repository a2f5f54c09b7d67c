"""Sequence models whose hidden states live on closed subgroups of U(d)."""
from . import autodiff, groups, matrix, models
from ._core import BACKEND
from .errors import (CheckpointError, ConfigError, DataError, InvalidTangentError, LieStateError,
                     NumericAbort, NumericRangeError, RankDeficientError, ShapeError)
from .groups import SubgroupSpec, TangentCoords, TokenParams
from .models import OSMFormer, OSMRNN, ReadoutHead

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CheckpointError", "ConfigError", "DataError", "InvalidTangentError", "LieStateError",
    "NumericAbort", "NumericRangeError", "OSMFormer", "OSMRNN", "RankDeficientError", "ReadoutHead",
    "ShapeError", "SubgroupSpec", "TangentCoords", "TokenParams", "autodiff", "groups", "matrix",
    "models",
]
