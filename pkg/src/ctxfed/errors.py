from __future__ import annotations


class InvalidInputError(ValueError):
    pass


class AggregationError(RuntimeError):
    pass


class DegenerateError(AggregationError):
    """The aggregation objective has no minimizer for the given inputs."""


class DivergedError(ArithmeticError):
    """Local optimization produced a non-finite iterate.

    ``last_finite`` holds the most recent parameter vector that was still finite.
    """

    def __init__(self, message: str, last_finite):
        super().__init__(message)
        self.last_finite = last_finite


class IdxParseError(ValueError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class IdxMagicError(IdxParseError):
    pass


class IdxTruncatedError(IdxParseError):
    pass


class IdxCountMismatchError(IdxParseError):
    pass


class SpecError(ValueError):
    """Experiment spec problems; ``problems`` lists every violation found."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)
