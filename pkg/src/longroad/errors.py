"""Exception taxonomy shared across the package.

Exit-code mapping for the CLI: usage errors -> 1, data/format errors -> 2,
numeric failures -> 3.
"""


class LongroadError(Exception):
    """Base class for all package errors."""


class ShapeError(LongroadError):
    """Dimension mismatch between operands; message carries both shapes."""


class NumericDomainError(LongroadError):
    """Elementwise op applied outside its numeric domain (log/sqrt of negatives)."""


class ContractError(LongroadError):
    """A documented call contract was violated (bad timestep, bad partition, ...)."""


class ConfigError(LongroadError):
    """Invalid configuration value or combination."""


class DataError(LongroadError):
    """Dataset-level problem (clip too short, empty directory, ...)."""


class FormatError(LongroadError):
    """Malformed binary file. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetricUndefinedError(LongroadError):
    """Metric has no defined value for this input (e.g. all pairs occluded)."""


class NumericFailure(LongroadError):
    """Non-finite value where finiteness is required (training abort)."""
