"""
Error handling utilities for levylab.

This module provides the exception hierarchy raised by the numerical
modules and the decorator the experiment pipelines use to attach the
failing stage name before an error reaches the command line.

Usage:
    @handle_stage_errors("resolvent")
    def solve_stage(config):
        # Any LevyLabError is logged and re-raised as StageFailed
        return solve_constant_drift(problem)
"""

import logging
import functools
from typing import Callable, Optional, Dict, Any

logger = logging.getLogger(__name__)


# ============================================================================
# EXIT CODES
# ============================================================================

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_INVARIANT_VIOLATED = 2
EXIT_CONFIG_INVALID = 3


# ============================================================================
# ERROR CLASSES
# ============================================================================

class LevyLabError(Exception):
    """Base exception for levylab"""
    def __init__(self, message: str, error_code: str = "UNKNOWN_ERROR", exit_code: int = EXIT_STAGE_FAILED):
        self.message = message
        self.error_code = error_code
        self.exit_code = exit_code
        super().__init__(self.message)


class InvalidParameter(LevyLabError):
    """Raised when an operation precondition is violated"""
    def __init__(self, message: str):
        super().__init__(message, "INVALID_PARAMETER")


class DegenerateMeasure(LevyLabError):
    """Raised when the spectral measure does not span the whole space"""
    def __init__(self, message: str, minimum: Optional[float] = None):
        self.minimum = minimum
        super().__init__(message, "DEGENERATE_MEASURE")


class DivergentIntegral(LevyLabError):
    """Raised when a radial moment of the Levy measure is infinite"""
    def __init__(self, message: str):
        super().__init__(message, "DIVERGENT_INTEGRAL")


class CutoffTooSmall(LevyLabError):
    """Raised when a frequency or spatial cutoff cannot meet its tail bound"""
    def __init__(self, message: str, required_nodes: Optional[int] = None):
        self.required_nodes = required_nodes
        super().__init__(message, "CUTOFF_TOO_SMALL")


class NonIntegrableAtOrigin(LevyLabError):
    """Raised when the compensated generator integrand is not integrable near zero"""
    def __init__(self, message: str, remainder: Optional[float] = None):
        self.remainder = remainder
        super().__init__(message, "NON_INTEGRABLE_AT_ORIGIN")


class NotApplicable(LevyLabError):
    """Raised when a diagnostic ratio has a vanishing denominator"""
    def __init__(self, message: str):
        super().__init__(message, "NOT_APPLICABLE")


class QuadratureBudgetExceeded(LevyLabError):
    """Raised when a quadrature rule would need more nodes than allowed"""
    def __init__(self, message: str):
        super().__init__(message, "QUADRATURE_BUDGET_EXCEEDED")


class NoContraction(LevyLabError):
    """Raised when the Picard iteration stops contracting"""
    def __init__(self, message: str, ratios: Optional[list] = None):
        self.ratios = ratios or []
        super().__init__(message, "NO_CONTRACTION")


class UnsupportedRegime(LevyLabError):
    """Raised for (alpha, beta) combinations the solver refuses"""
    def __init__(self, message: str):
        super().__init__(message, "UNSUPPORTED_REGIME")


class ThresholdNotReached(LevyLabError):
    """Raised when no lambda in a scan brings the gradient below 1/3"""
    def __init__(self, message: str):
        super().__init__(message, "THRESHOLD_NOT_REACHED")


class ContractionViolated(LevyLabError):
    """Raised when a transform is requested from a solution with large gradient"""
    def __init__(self, message: str, bound: Optional[float] = None):
        self.bound = bound
        super().__init__(message, "CONTRACTION_VIOLATED")


class BoxExceeded(LevyLabError):
    """Raised when a trajectory leaves the lattice a transform lives on"""
    def __init__(self, message: str, time: Optional[float] = None):
        self.time = time
        super().__init__(message, "BOX_EXCEEDED")


class DegenerateInput(LevyLabError):
    """Raised when two-point statistics get coincident points"""
    def __init__(self, message: str):
        super().__init__(message, "DEGENERATE_INPUT")


class ConfigInvalid(LevyLabError):
    """Raised when an experiment configuration fails validation"""
    def __init__(self, message: str, section: Optional[str] = None, key: Optional[str] = None):
        self.section = section
        self.key = key
        if section and key:
            message = f"[{section}] {key}: {message}"
        super().__init__(message, "CONFIG_INVALID", EXIT_CONFIG_INVALID)


class StageFailed(LevyLabError):
    """Raised when a pipeline stage fails; wraps the original error"""
    def __init__(self, stage: str, original_error: Exception):
        self.stage = stage
        self.original_error = original_error
        detail = getattr(original_error, "message", None) or str(original_error)
        super().__init__(f"stage '{stage}' failed: {detail}", "STAGE_FAILED", EXIT_STAGE_FAILED)


# ============================================================================
# ERROR DECORATORS
# ============================================================================

def handle_stage_errors(stage: str) -> Callable:
    """
    Decorator naming the pipeline stage of any error raised inside it.

    ConfigInvalid passes through untouched so the CLI can report it with
    its own exit code; already wrapped errors are not wrapped twice.

    Usage:
        @handle_stage_errors("density")
        def density_stage(config):
            return tabulate(spec, 1.0, box)
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except (ConfigInvalid, StageFailed):
                raise
            except LevyLabError as e:
                logger.error(f"{e.error_code} in stage {stage} ({func.__name__}): {e.message}")
                raise StageFailed(stage, e) from e
            except Exception as e:
                logger.error(f"Unexpected error in stage {stage} ({func.__name__}): {str(e)}", exc_info=True)
                raise StageFailed(stage, e) from e
        return wrapper
    return decorator


# ============================================================================
# ERROR REPORTING
# ============================================================================

def error_payload(error: Exception) -> Dict[str, Any]:
    """
    Build the JSON-ready description of an error for run manifests.

    Args:
        error: The exception that ended the run

    Returns:
        Dict with error message, error code and stage (when known)
    """
    if isinstance(error, StageFailed):
        inner = error.original_error
        return {
            "error": error.message,
            "error_code": getattr(inner, "error_code", "INTERNAL_ERROR"),
            "stage": error.stage,
        }
    if isinstance(error, LevyLabError):
        return {"error": error.message, "error_code": error.error_code, "stage": None}
    return {"error": str(error), "error_code": "INTERNAL_ERROR", "stage": None}


def exit_code_for(error: Exception) -> int:
    """Map an exception to the CLI exit status"""
    if isinstance(error, LevyLabError):
        return error.exit_code
    return EXIT_STAGE_FAILED
