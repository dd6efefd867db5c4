"""Mixture-of-experts transformer for multi-channel user behaviour sequences.

Subpackages are imported lazily by callers; this module only exposes the
version and the error hierarchy.
"""

from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, LengthMismatchError,
                     NumericError, ParseError, SchemaError, UserMoeError, VocabularyError)

__version__ = "0.1.0"

__all__ = ["UserMoeError", "DimensionError", "NumericError", "ContractError", "VocabularyError",
           "SchemaError", "ParseError", "ConfigError", "CheckpointError", "LengthMismatchError",
           "__version__"]
