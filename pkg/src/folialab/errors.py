"""Exception types shared by the library and mapped to CLI exit codes."""


class FoliaError(Exception):
    """Base class for library errors."""

    exit_code = 3


class ConfigError(FoliaError, ValueError):
    """Invalid input, configuration or precondition violation."""

    exit_code = 2


class NumericalError(FoliaError, ArithmeticError):
    """A numerical routine failed to converge or left its valid domain."""

    exit_code = 3


class ToleranceError(FoliaError):
    """An estimator did not reach its requested tolerance."""

    exit_code = 4
