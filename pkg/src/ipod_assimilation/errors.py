"""Exception hierarchy shared by all ipod_assimilation modules.

Every error records the module it was raised from (``provenance``) so the CLI
can report where a failure originated without printing a traceback.
"""

from __future__ import annotations

from typing import Any


class IpodaError(Exception):
    """Base class for all package errors."""

    def __init__(self, message: str, *, provenance: str | None = None) -> None:
        super().__init__(message)
        self.provenance = provenance or "ipod_assimilation"

    def describe(self) -> str:
        return f"[{self.provenance}] {self}"


class ContractViolation(IpodaError, ValueError):
    """Precondition failure: dimension mismatch, bad index, non-finite input."""


class WeightNotSPDError(IpodaError, ValueError):
    """Weight matrix is not symmetric positive definite."""


class EmptyStreamError(IpodaError, ValueError):
    """An operation needs at least one nonzero snapshot."""


class NotFinalizedError(IpodaError, RuntimeError):
    """Reconstruction requested before the pending block was flushed."""


class NumericalDegradationError(IpodaError, ArithmeticError):
    """Reorthogonalization did not reach tol_o within the pass cap."""


class NewtonConvergenceError(IpodaError, ArithmeticError):
    """Implicit step did not converge; ``residuals`` holds the history."""

    def __init__(self, message: str, *, residuals: list[float], step: int, provenance: str | None = None) -> None:
        super().__init__(message, provenance=provenance)
        self.residuals = residuals
        self.step = step


class DivergenceError(IpodaError, ArithmeticError):
    """Non-finite objective or iterate; ``trace`` holds what was recorded so far."""

    def __init__(self, message: str, *, trace: Any = None, provenance: str | None = None) -> None:
        super().__init__(message, provenance=provenance)
        self.trace = trace


class DomainError(IpodaError, ValueError):
    """Step size or constants outside the range a bound is stated for."""


class ConfigError(IpodaError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, *, key: str | None = None, line: int | None = None) -> None:
        where = key or "<root>"
        if line is not None:
            where = f"{where} (line {line})"
        super().__init__(f"{where}: {message}", provenance="config")
        self.key = key
        self.line = line


class InvariantFailure(IpodaError, AssertionError):
    """A runtime invariant checked by an experiment did not hold."""


class ArtifactError(IpodaError):
    """Run artifacts are missing or unreadable."""


def provenance_of(exc: BaseException) -> str:
    """Innermost package module the exception passed through, else the module of its type."""
    if isinstance(exc, IpodaError):
        return exc.provenance
    where = type(exc).__module__
    tb = exc.__traceback__
    while tb is not None:
        module = tb.tb_frame.f_globals.get("__name__", "")
        if module.startswith("ipod_assimilation."):
            where = module.rsplit(".", 1)[-1]
        tb = tb.tb_next
    return where


def describe_exception(exc: BaseException) -> str:
    if isinstance(exc, IpodaError):
        return exc.describe()
    return f"[{provenance_of(exc)}] {type(exc).__name__}: {exc}"
