"""curio: multi-task visual representation learning on a simulated tabletop.

A small ConvNet trunk is trained from scratch on four self-supervised
interaction tasks (grasp, push, poke, instance identity) generated by a
built-in 2D simulator, then evaluated as a frozen feature extractor.
"""

from .errors import (
    ConfigurationError,
    CurioError,
    DomainError,
    GenerationError,
    IncompatibilityError,
    MissingInputError,
    NumericError,
    ScheduleError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CurioError",
    "ConfigurationError",
    "DomainError",
    "GenerationError",
    "IncompatibilityError",
    "MissingInputError",
    "NumericError",
    "ScheduleError",
    "UsageError",
    "__version__",
]
