class UMAFDError(Exception):
    """Base class for every error raised by this package."""


class FileError(UMAFDError):
    pass


class SchemaError(UMAFDError):
    pass


class DataError(UMAFDError):
    pass


class ShapeError(UMAFDError):
    pass


class ConfigError(UMAFDError):
    pass
