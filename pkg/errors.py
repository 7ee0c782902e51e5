"""
Toolkit exceptions.

Every error class carries the exit code the CLI returns when it escapes a
command, so `complementarity_cli.main` can map failures without a lookup table.
"""

from typing import Optional


class ToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class StructuralError(ToolkitError, ValueError):
    """Shape, spec or argument mismatch detected before any numeric work."""

    exit_code = 6


class NumericError(ToolkitError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 4


class DivergenceError(NumericError):
    """A training objective became non-finite."""

    exit_code = 4

    def __init__(self, message: str, epoch: Optional[int] = None, term: Optional[str] = None):
        self.message = message
        self.epoch = epoch
        self.term = term
        prefix = f"[{term}] " if term else ""
        suffix = f" (epoch {epoch})" if epoch is not None else ""
        super().__init__(f"{prefix}{message}{suffix}")

    def tagged(self, term: str) -> 'DivergenceError':
        """Return a copy tagged with the MI term or strategy name."""
        return DivergenceError(self.message, epoch=self.epoch, term=term)


class GenerationError(ToolkitError):
    """Synthetic generation could not complete (rejection budget, empty class)."""

    exit_code = 3


class LoadError(ToolkitError):
    """A persisted dataset, joint, report or model failed validation on load."""

    exit_code = 6


class ConfigError(ToolkitError):
    """Configuration rejected at parse time."""

    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"config field '{field}': {message}")


# Exit code for a command that completed but produced an undefined metric.
EXIT_UNDEFINED_METRIC = 5
EXIT_INTERRUPTED = 130
