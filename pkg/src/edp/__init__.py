"""Privacy-preserving ensemble learning on a desk-scale simulated edge/cloud deployment."""

from .errors import ContractError, EdpError, FormatError, NumericError, ShapeError, StageError

__version__ = "0.1.0"

__all__ = ["ContractError", "EdpError", "FormatError", "NumericError", "ShapeError", "StageError"]
