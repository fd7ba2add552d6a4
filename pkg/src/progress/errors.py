"""Error handling module for the fpm-singleshot progress system.

This module provides the exception hierarchy shared by every numerical module,
error classification into CLI exit codes, and context-aware remediation
suggestions for pipeline errors.
"""

from typing import Dict, Optional
from enum import Enum
from datetime import datetime
from dataclasses import dataclass, field
from abc import ABC, abstractmethod
from loguru import logger
from progress.state import RunState


class ErrorCategory(Enum):
    """Error categories; the value is the CLI exit code."""
    CONFIG = 2
    NUMERIC = 3
    IO = 4
    INTERNAL = 1


class FpmError(Exception):
    """Base class for every error raised by fpm-singleshot."""
    category = ErrorCategory.INTERNAL

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details


class ConfigurationError(FpmError):
    """Invalid settings, or a geometry that cannot support the passband."""
    category = ErrorCategory.CONFIG


class SizeError(FpmError):
    """Shape or length mismatch between inputs."""
    category = ErrorCategory.CONFIG


class DomainError(FpmError):
    """Input value outside the domain of an operation."""
    category = ErrorCategory.CONFIG


class ContractError(FpmError):
    """API misuse, e.g. a non-scalar loss handed to backward()."""
    category = ErrorCategory.CONFIG


class NumericError(FpmError):
    """NaN or inf detected during a forward or backward pass."""
    category = ErrorCategory.NUMERIC

    def __init__(self, message: str, op: Optional[str] = None,
                 iteration: Optional[int] = None, **details):
        super().__init__(message, op=op, iteration=iteration, **details)
        self.op = op
        self.iteration = iteration


class FormatError(FpmError):
    """Malformed array file; offset is the byte position of the problem."""
    category = ErrorCategory.IO

    def __init__(self, message: str, offset: int = 0, **details):
        super().__init__(f"{message} (at byte offset {offset})", offset=offset, **details)
        self.offset = offset


def categorize(exc: BaseException) -> ErrorCategory:
    """Map any exception to an ErrorCategory."""
    if isinstance(exc, FpmError):
        return exc.category
    if isinstance(exc, OSError):
        return ErrorCategory.IO
    return ErrorCategory.INTERNAL


@dataclass
class ErrorReport:
    """Data class representing a handled error with context information."""
    category: ErrorCategory
    message: str
    stage: str
    timestamp: datetime
    details: Dict = field(default_factory=dict)
    suggestion: str = ""

    @property
    def exit_code(self) -> int:
        return self.category.value

    def one_line(self) -> str:
        """Machine-parsable single line for stderr."""
        text = self.message.replace('"', "'").replace("\n", " ")
        return f'error category={self.category.name.lower()} stage={self.stage} message="{text}"'


class ErrorHandler(ABC):
    """Abstract base class for error handlers."""

    @abstractmethod
    def get_remediation_suggestion(self, report: ErrorReport) -> str:
        """Get a remediation suggestion for the error.

        Args:
            report: ErrorReport to get a suggestion for

        Returns:
            str: Remediation suggestion
        """


class ConfigErrorHandler(ErrorHandler):
    """Handler for configuration, shape and domain errors."""

    def get_remediation_suggestion(self, report: ErrorReport) -> str:
        if "unknown" in report.message.lower():
            return ("Remove the unknown key from the config file; "
                    "config.sample.yaml lists every accepted key.")
        if "upsample" in report.message.lower() or "nyquist" in report.message.lower():
            return ("The high-res grid cannot hold the synthetic passband. "
                    "Increase upsample_factor or reduce num_leds.")
        return f"Check the inputs and config values used by stage {report.stage}."


class NumericErrorHandler(ErrorHandler):
    """Handler for NaN/inf failures."""

    def get_remediation_suggestion(self, report: ErrorReport) -> str:
        where = ""
        if report.details.get("op"):
            where = f" in {report.details['op']}"
        if report.details.get("iteration") is not None:
            where += f" at iteration {report.details['iteration']}"
        return (f"Non-finite values appeared{where}. "
                "Lower the learning rate or check the input intensities for NaN.")


class IoErrorHandler(ErrorHandler):
    """Handler for file format and filesystem errors."""

    def get_remediation_suggestion(self, report: ErrorReport) -> str:
        if report.details.get("offset") is not None:
            return ("The array file is truncated or was not written by fpm-singleshot; "
                    "regenerate it.")
        return "Check that input paths exist and the output directory is writable."


class ErrorManager:
    """Manager for handling errors in the pipeline."""

    def __init__(self, state: Optional[RunState] = None):
        """Initialize the ErrorManager.

        Args:
            state: RunState used to record error events (optional)
        """
        self.state = state
        self.handlers: Dict[ErrorCategory, ErrorHandler] = {
            ErrorCategory.CONFIG: ConfigErrorHandler(),
            ErrorCategory.NUMERIC: NumericErrorHandler(),
            ErrorCategory.IO: IoErrorHandler(),
        }

    def get_remediation_suggestion(self, report: ErrorReport) -> str:
        handler = self.handlers.get(report.category)
        if handler is None:
            return "No remediation suggestion available for this error type."
        return handler.get_remediation_suggestion(report)

    def report_error(self, exc: BaseException, stage: str) -> ErrorReport:
        """Classify an exception, record it and return the report.

        Args:
            exc: The exception raised by a stage
            stage: Stage where the error occurred

        Returns:
            ErrorReport with exit code and suggestion filled in
        """
        category = categorize(exc)
        details = dict(getattr(exc, "details", {}) or {})
        message = getattr(exc, "message", None) or str(exc) or type(exc).__name__
        if isinstance(exc, FormatError):
            message = str(exc)
        report = ErrorReport(
            category=category,
            message=message,
            stage=stage,
            timestamp=datetime.now(),
            details=details,
        )
        report.suggestion = self.get_remediation_suggestion(report)

        if self.state is not None:
            self.state.record_event(
                "error",
                {
                    "category": category.name,
                    "message": message,
                    "stage": stage,
                    "details": {k: v for k, v in details.items() if v is not None},
                },
            )
        logger.error(f"{stage} failed ({category.name}): {message}")
        return report

