"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes, widths or class counts do not line up."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""


class NotPositiveDefiniteError(ValueError):
    """A matrix that must be positive definite has a non-positive pivot."""


class ContainerError(Exception):
    """Base class for problems with serialized artifact files."""


class BadMagicError(ContainerError):
    """File does not start with the container magic."""


class VersionMismatchError(ContainerError):
    """Container format version is not supported."""


class ChecksumError(ContainerError):
    """Stored checksum does not match the file contents (corruption/truncation)."""


class InvariantError(ContainerError):
    """Container parsed but its contents violate a documented invariant."""


class ConfigError(ValueError):
    """A run configuration file failed validation."""
