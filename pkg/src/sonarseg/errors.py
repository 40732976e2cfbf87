"""Exception hierarchy.

The CLI maps these onto exit-code classes: ``DataError`` subclasses exit 3,
``StorageError`` subclasses exit 4, ``ParameterError`` exits 2 (usage).
"""


class SonarSegError(Exception):
    """Base class for all package errors."""


class ParameterError(SonarSegError, ValueError):
    """An argument is outside its allowed range."""


class DimensionError(SonarSegError, ValueError):
    """Tensor or raster shapes are incompatible."""


class DataError(SonarSegError):
    """Input data is malformed or inconsistent."""


class MissingMaskError(DataError):
    """An image in a dataset directory has no paired mask."""


class NonBinaryMaskError(DataError):
    """A mask contains values other than 0 and 1 (or 0 and 255 on disk)."""


class BadDimensionsError(DataError):
    """A raster on disk does not have the expected size."""


class StorageError(SonarSegError):
    """A serialized file cannot be read or written."""


class FormatError(StorageError):
    """Magic bytes or format version do not match."""


class TruncatedFileError(StorageError):
    """The file ended before all declared content was read."""


class ShapeMismatchError(DataError):
    """A stored tensor's shape disagrees with the architecture."""

    def __init__(self, name: str, expected, found):
        super().__init__(f"layer {name!r}: expected shape {tuple(expected)}, file has {tuple(found)}")
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)
