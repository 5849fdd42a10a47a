"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError -> 3, NumericError -> 4,
UsageError -> 2. ContractError signals a caller bug (wrong shapes, stepping
a finished episode) and is never caught internally.
"""


class ContractError(ValueError):
    """A function precondition was violated by the caller."""


class DataError(ValueError):
    """Input data is unusable (empty target, malformed file, bad manifest)."""


class ParseError(DataError):
    """A file failed to parse; message carries file path and line number."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required (diverged training)."""


class UsageError(ValueError):
    """Bad command-line or config-file usage."""
