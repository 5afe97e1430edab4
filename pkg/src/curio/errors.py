"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies rather than bare ValueError.
"""


class CurioError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(CurioError):
    """Invalid wiring: bad shapes, unknown keys, impossible layer chains."""


class UsageError(CurioError):
    """API misuse: non-scalar backward, graph cycles, bad CLI invocation."""


class DomainError(CurioError):
    """Inputs outside the mathematical domain of an op (e.g. zero-norm rows)."""


class NumericError(CurioError):
    """Non-finite values appeared where finite ones are required."""


class GenerationError(CurioError):
    """A rejection sampler exhausted its attempt budget."""


class ScheduleError(CurioError):
    """A training cycle was invoked without the batches it needs."""


class MissingInputError(CurioError):
    """A required input file or directory does not exist."""


class IncompatibilityError(CurioError):
    """A checkpoint or dataset does not match the active configuration."""
