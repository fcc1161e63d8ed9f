"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class ParseError(ValueError):
    """Malformed input file; the message names the file and line."""


class GradientIsolationError(RuntimeError):
    """A gradient reached a parameter outside the subnetwork it may update."""
