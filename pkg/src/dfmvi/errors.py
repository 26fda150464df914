"""Exception types shared across the package."""


class DfmError(Exception):
    """Base class for all package errors."""


class PanelFormatError(DfmError):
    """Malformed panel input (bad cell, ragged row, missing header)."""


class DomainError(DfmError):
    """Invalid configuration or argument outside its admissible domain."""


class NumericalError(DfmError):
    """Numerical failure (non-PD matrix after jitter, non-finite objective)."""
