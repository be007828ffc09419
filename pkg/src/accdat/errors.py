"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError / InternalInvariantError -> 4.
"""


class AccdatError(Exception):
    """Base class for all package errors."""


class InvalidArgument(AccdatError, ValueError):
    """An operation was called with arguments violating its contract."""


class ConfigError(AccdatError):
    """Configuration file or config object is invalid."""


class DataError(AccdatError):
    """Corpus, manifest, or feature file is malformed or inconsistent."""


class StateError(AccdatError):
    """Stateful component used before its state was initialized."""


class NumericError(AccdatError):
    """NaN / inf encountered where finite values are required."""


class InfeasibleTarget(AccdatError):
    """CTC target cannot be aligned within the given frame count."""


class ResourceLimit(AccdatError):
    """A guarded brute-force computation would exceed its search budget."""


class InternalInvariantError(AccdatError):
    """An internal invariant was violated; indicates a bug, aborts the run."""
