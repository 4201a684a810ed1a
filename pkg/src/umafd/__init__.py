"""Unsupervised RGB-to-depth modality adaptation for binary fall detection."""

from umafd.errors import (
    ConfigError,
    DataError,
    FileError,
    SchemaError,
    ShapeError,
    UMAFDError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FileError",
    "SchemaError",
    "ShapeError",
    "UMAFDError",
]
