"""Exception hierarchy shared across the package.

Everything user-facing derives from ``DeskfaceError`` so the CLI can map
failures to exit codes: validation/contract problems exit 1, IO problems
exit 2 (plain ``OSError`` covers the latter).
"""


class DeskfaceError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(DeskfaceError):
    """Tensor or box shapes are incompatible with the requested operation."""


class NumericError(DeskfaceError):
    """An operation produced NaN or Inf, or a gradient went non-finite."""


class ContractError(DeskfaceError):
    """A documented precondition was violated by the caller."""


class ValidationError(DeskfaceError):
    """A declarative spec (network, train config) failed validation.

    ``problems`` lists every violation found, not just the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ParseError(DeskfaceError):
    """An annotation or config file is malformed; carries the line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(DeskfaceError):
    """Bad key or value in a run configuration file."""


class EvalError(DeskfaceError):
    """Evaluation is undefined for the given inputs (e.g. no ground truth)."""


class CheckpointError(DeskfaceError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Magic bytes do not identify a checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload was read."""


class CheckpointCrcError(CheckpointError):
    """Stored CRC-32 does not match the file contents."""
