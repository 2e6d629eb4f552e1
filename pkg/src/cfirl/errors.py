"""Exception types shared across the package."""


class CfirlError(Exception):
    """Base class for package errors."""


class ValidationError(CfirlError):
    """Invalid input: bad trajectory, mismatched dimensions, bad config."""


class NumericalError(CfirlError):
    """Non-finite values or diverging computations."""


class GenerationError(CfirlError):
    """World or candidate generation failed after bounded retries."""


class ConflictError(CfirlError):
    """Write rejected because the target is in a conflicting state."""


class EmptyExportError(CfirlError):
    """Export requested but no complete annotation sessions exist."""
