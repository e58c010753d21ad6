class ChmflError(Exception):
    """Base class for every error raised by the library."""


class ShapeError(ChmflError):
    """Incompatible shapes, non-scalar backward root or failed shape audit."""


class DomainError(ChmflError):
    """A value outside the domain an operation is defined on."""


class NonFiniteError(ChmflError):
    """NaN or Inf found while the finite-value debug check is enabled."""


class VolumeFormatError(ChmflError):
    """Malformed volume container or volume invariant breach."""


class ManifestError(ChmflError):
    """Invalid dataset manifest."""


class CheckpointError(ChmflError):
    """Unreadable or incompatible checkpoint."""


class DatasetError(ChmflError):
    """Dataset unusable for the requested protocol."""


class ConfigError(ChmflError):
    """Invalid run configuration."""


class MissingParameterError(ShapeError, KeyError):
    """Lookup of a parameter name the table does not hold."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""
