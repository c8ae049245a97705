"""Named error conditions raised by the construction kit.

Every error is a subclass of :class:`ConstructionError` so callers (the CLI in
particular) can map all validation and estimate failures onto one exit code.
"""

from __future__ import annotations


class ConstructionError(Exception):
    """Base class for validation and estimate failures."""


class InvalidExponent(ConstructionError, ValueError):
    """An integrability exponent lies outside ``[1, inf]``."""


class ResolutionTooCoarse(ConstructionError):
    """The grid cannot resolve the requested oscillation or concentration."""


class NonZeroMean(ConstructionError):
    """An operator that needs a zero-mean input received one with nonzero mean."""


class DimensionTooSmall(ConstructionError, ValueError):
    """The construction needs at least three space dimensions."""


class InadmissibleExponents(ConstructionError, ValueError):
    """The exponent triple violates the admissibility inequality of its variant."""

    def __init__(self, message: str, inequality: str = ""):
        super().__init__(message)
        self.inequality = inequality


class ConcentrationTooSmall(ConstructionError, ValueError):
    """The concentration parameter is too small for disjoint block supports."""


class InvalidSigma(ConstructionError, ValueError):
    """The time-cutoff width lies outside its admissible range."""


class MeanDrift(ConstructionError):
    """The target density does not have a time-independent spatial mean."""


class BudgetExhausted(ConstructionError):
    """The oscillation search ran out of candidates without a passing step.

    ``report`` and ``state`` carry the best failing attempt.
    """

    def __init__(self, message: str, report=None, state=None):
        super().__init__(message)
        self.report = report
        self.state = state
