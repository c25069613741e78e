from typing import Any, Dict, Optional


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class IdlewatchError(Exception):
    """Root of every error raised by the library."""

    exit_code = EXIT_USAGE


class InvalidArgumentError(IdlewatchError, ValueError):
    exit_code = EXIT_USAGE


class DetectorUsageError(IdlewatchError, RuntimeError):
    """A detector was driven out of protocol (update after alarm, index gap)."""

    exit_code = EXIT_USAGE


class NumericalFailureError(IdlewatchError, ArithmeticError):
    """A numerical routine did not produce a usable answer.

    ``diagnostics`` holds whatever the failing routine knew at the time
    (root moduli, quadrature error estimate, eigenvalues ...).
    """

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{key}={value}" for key, value in self.diagnostics.items())
        return f"{base} ({details})"


class SnapshotFormatError(IdlewatchError, OSError):
    exit_code = EXIT_IO


class CellFailedError(IdlewatchError):
    """I/O failure while running or persisting one sweep cell."""

    exit_code = EXIT_IO

    def __init__(self, cell_id: str, message: str):
        super().__init__(f"cell {cell_id}: {message}")
        self.cell_id = cell_id
