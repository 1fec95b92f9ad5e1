"""Exception types shared across the package.

Every domain error derives from VoxError so the service layer can map them
to structured HTTP responses and the CLI can translate them to exit code 1.
"""


class VoxError(Exception):
    """Base class for all domain errors."""


class InvalidInputError(VoxError):
    pass


class ProxyValidationError(InvalidInputError):
    """Invalid proxy document; carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class OutOfBoundsError(VoxError):
    pass


class ShapeError(VoxError):
    """Tensor/grid shape or resolution mismatch."""


class ConfigurationError(VoxError):
    pass


class ModelNotReadyError(VoxError):
    """Sampling requested before trained weights were loaded."""


class CacheMissError(VoxError):
    """Requested timesteps absent from the volume cache."""

    def __init__(self, missing, message=None):
        self.missing = list(missing)
        super().__init__(message or f"volume cache missing timesteps {self.missing}")


class InvalidPartError(VoxError):
    pass


class DegenerateInputError(VoxError):
    pass


class NotReadyError(VoxError):
    """Session is not in a state that allows the requested operation."""


class BusyError(VoxError):
    """Session already has a job in flight."""


class TrainingFault(VoxError):
    """Non-finite loss during training; carries the dump path if written."""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message)


class EmptyMeshError(VoxError):
    pass
