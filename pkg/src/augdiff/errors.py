"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, missing
artifacts exit 2, numeric failures exit 3.
"""


class AugDiffError(Exception):
    pass


class InvalidArgument(AugDiffError, ValueError):
    pass


class NumericDomainError(AugDiffError, ArithmeticError):
    """A non-finite value entered an op, or an input left its valid domain."""


class NumericFailure(AugDiffError, ArithmeticError):
    """Training produced a non-finite loss. ``report`` holds diagnostics."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class FormatError(AugDiffError, ValueError):
    pass


class UndefinedMetric(AugDiffError, ValueError):
    pass


class ConfigError(AugDiffError, ValueError):
    pass


class MissingArtifact(AugDiffError, FileNotFoundError):
    pass
