"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to (1 usage, 2 data/format,
3 numeric failure).
"""


class LeqModError(Exception):
    exit_code = 2


class DimensionError(LeqModError, ValueError):
    """Array shapes, patch sizes or origins that do not fit together."""


class CoverageError(LeqModError, ValueError):
    """Reassembly input leaves at least one voxel uncovered."""


class FormatError(LeqModError, ValueError):
    """Malformed LQMV/LQMP file or manifest."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DomainError(LeqModError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class GenerationError(LeqModError, RuntimeError):
    """Phantom or cohort generation could not satisfy its constraints."""


class ConfigError(LeqModError, ValueError):
    exit_code = 1


class TrainingError(LeqModError, RuntimeError):
    exit_code = 3


class EvaluationError(LeqModError, RuntimeError):
    pass
