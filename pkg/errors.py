"""
errors.py - Exception hierarchy for the cache-enabled multicast latency simulator.

Library code raises these; the scheme drivers and the CLI translate them into
run statuses and exit codes.
"""

from typing import Optional


class CacheLatencyError(Exception):
    """Root of every error raised by this package."""


class ConfigError(CacheLatencyError, ValueError):
    """
    Invalid configuration value or configuration document.

    Args:
        message: Human-readable description
        key: Offending key, when one can be named
        line: 1-based line in the source document, when known
    """

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.key = key
        self.line = line

    def __str__(self) -> str:
        base = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {base}"
        return base


class NonPositiveDefiniteOmega(CacheLatencyError):
    """A quantization covariance has an eigenvalue at or below the floor."""


class DegenerateFronthaul(CacheLatencyError):
    """The worst fronthaul rate is at or below the rate floor."""


class ZeroRate(CacheLatencyError):
    """A group that must transmit has a delivery rate below the floor."""


class SingularExpansionPoint(CacheLatencyError):
    """A tangent was requested at a point that is not positive definite."""


class NonHermitianInput(CacheLatencyError):
    """A matrix expected to be Hermitian is not."""


class InfeasibleExpansionPoint(CacheLatencyError):
    """No strictly feasible start point can be built from the expansion point."""


class InfeasiblePoint(CacheLatencyError):
    """A point handed to the solver lies outside the barrier domain."""


class LineSearchStall(CacheLatencyError):
    """Backtracking could not find a descent step."""


class NumericalBreakdown(CacheLatencyError):
    """The Newton system could not be factorized even after regularization."""


class RandomizationInfeasible(CacheLatencyError):
    """No randomization candidate met the rate targets."""
