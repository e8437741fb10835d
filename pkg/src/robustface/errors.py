"""Exception hierarchy shared across the package."""


class RobustFaceError(Exception):
    """Base class for all package errors."""


class DimensionError(RobustFaceError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(RobustFaceError, ArithmeticError):
    """An operation produced (or was fed) a non-finite value."""


class TapeError(RobustFaceError, RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, replayed tape, ...)."""


class AttackError(NumericError):
    """PGD hit a non-finite gradient."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class BudgetError(RobustFaceError, AssertionError):
    """An adversarial example left the L-inf ball or the pixel range."""


class ConfigError(RobustFaceError, ValueError):
    """Invalid configuration value; ``pointer`` is a JSON pointer to the offending key."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
        self.detail = message


class DatasetError(RobustFaceError):
    """Base class for data ingestion and sampling problems."""


class ManifestError(DatasetError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        prefix = f"manifest row {row}: " if row is not None else ""
        super().__init__(prefix + message)
        self.row = row


class MissingImageError(DatasetError, FileNotFoundError):
    def __init__(self, path, row: int):
        super().__init__(f"manifest row {row}: image not found: {path}")
        self.row = row
        self.path = path


class ImageFormatError(DatasetError, ValueError):
    pass


class ImageShapeError(DatasetError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        prefix = f"manifest row {row}: " if row is not None else ""
        super().__init__(prefix + message)
        self.row = row


class EmptyDatasetError(DatasetError, ValueError):
    pass


class SamplingError(DatasetError, ValueError):
    """Dataset cannot satisfy a sampler's preconditions."""


class CheckpointError(RobustFaceError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass
