"""Exception hierarchy.

Everything raised on bad input derives from ``ValidationError`` and every
optimizer failure from ``SolverError``; the CLI maps the two families onto
exit codes 2 and 3.
"""


class CovertSenseError(Exception):
    pass


class ValidationError(CovertSenseError, ValueError):
    pass


class SolverError(CovertSenseError, RuntimeError):
    pass


class AbsoluteContinuityViolation(ValidationError):
    pass


class AlphabetMismatch(ValidationError):
    pass


class NonZeroNullMean(ValidationError):
    pass


class DegenerateDenominator(SolverError):
    pass


class SolverDiverged(SolverError):
    pass


class NoChallenger(ValidationError):
    pass


class ModelError(ValidationError):
    pass


class BudgetTooSmall(ValidationError):
    pass


class SteppedAfterStop(CovertSenseError, RuntimeError):
    pass


class TooFewEpisodes(ValidationError):
    pass


class TooFewTraces(ValidationError):
    pass


class InsufficientCells(ValidationError):
    pass
