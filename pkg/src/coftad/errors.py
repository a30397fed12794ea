"""Exception types shared across the package.

The CLI maps these onto process exit codes: config problems exit with 2,
data problems with 3, numerical failures with 4.
"""


class CoftadError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CoftadError):
    """Invalid or inconsistent configuration."""


class DataError(CoftadError):
    """Dataset, split, or image I/O problem."""


class NumericalError(CoftadError):
    """Non-finite values or otherwise broken numerics."""


class DegenerateEmbeddingError(NumericalError):
    """A zero-norm embedding reached a cosine or normalization step."""


class CheckpointError(CoftadError):
    """Checkpoint file missing or unreadable."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint tensors do not match the target architecture."""

    def __init__(self, message: str, offending: list[str]):
        super().__init__(message)
        self.offending = list(offending)
