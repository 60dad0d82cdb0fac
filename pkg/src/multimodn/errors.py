"""Exception hierarchy shared by every module."""


class MultiModNError(Exception):
    """Base class for all package errors."""


class ShapeError(MultiModNError, ValueError):
    """Array dimensions do not match what an operation expects."""


class ContractError(MultiModNError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(MultiModNError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(MultiModNError, ValueError):
    """A document or data file could not be parsed."""


class ConfigError(MultiModNError, ValueError):
    """A configuration document is invalid."""


class UndefinedMetricError(MultiModNError, ValueError):
    """A metric is undefined for the given inputs (e.g. a single class)."""
