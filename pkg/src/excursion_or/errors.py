"""Exception taxonomy shared across the package.

Every error raised on purpose derives from :class:`ExcursionError` so callers
(and the command line front end) can map failures to exit codes without
string matching.  Validation problems that should be reported in bulk are
collected into a :class:`ValidationReport` instead of being raised one at a
time.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ExcursionError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(ExcursionError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class SpecError(ExcursionError, ValueError):
    """A feature, analysis, or scenario specification is malformed."""


class ShapeError(ExcursionError, ValueError):
    """Array or trajectory dimensions are inconsistent."""


class PositivityError(ExcursionError, ValueError):
    """A probability ratio divides by zero (or an essential probability is degenerate)."""


class EligibilityViolation(ExcursionError, ValueError):
    """A record is treated (or randomized) while marked unavailable."""


class PositivityViolation(ExcursionError, ValueError):
    """An eligible record's randomization probability is outside the trusted band."""


class InsufficientDataError(ExcursionError, ValueError):
    """A model fit has no usable records after subsetting."""


class ConvergenceError(ExcursionError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, iterations: int | None = None,
                 final_norm: float | None = None) -> None:
        super().__init__(message)
        self.iterations = iterations
        self.final_norm = final_norm


class SingularError(ExcursionError, RuntimeError):
    """A linear system at the core of a solver is singular."""


class NumericalError(ExcursionError, RuntimeError):
    """A computation produced a non-finite value that damping could not repair."""


class ScenarioError(ExcursionError, ValueError):
    """A simulation scenario is internally inconsistent (e.g. means outside [0,1])."""


class StudyError(ExcursionError, RuntimeError):
    """A simulation study failed too often to summarize honestly."""


class FileFormatError(ExcursionError, ValueError):
    """An input file is missing required columns or cannot be parsed."""


@dataclass(frozen=True)
class Violation:
    """One invariant violation found while validating a dataset."""

    kind: str                 # "shape" | "domain" | "eligibility" | "positivity"
    subject: object           # subject identifier, or None for table-level problems
    t: int | None             # 1-based decision index, or None
    message: str

    def __str__(self) -> str:
        where = "" if self.subject is None else f" (subject={self.subject!r}, t={self.t})"
        return f"[{self.kind}]{where} {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    """Every invariant violation found in a raw dataset, in input order."""

    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "dataset valid"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [str(v) for v in self.violations]
        return "\n".join(lines)
