"""Exceptions raised by lesionaware.

Each one subclasses the closest builtin so callers that only know about `ValueError` and friends
still catch them.
"""

__all__ = [
    'CheckpointError',
    'ConfigError',
    'DatasetLoadError',
    'DimensionError',
    'GraphError',
    'IncompatibleCheckpointError',
    'NumericError',
    'SplitError',
    'UsageError',
    'ValidationError',
]


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class GraphError(RuntimeError):
    pass


class ValidationError(ValueError):
    pass


class SplitError(ValueError):
    pass


class DatasetLoadError(ValueError):
    def __init__(self, entry, msg):
        self.entry = entry
        super().__init__(f'{entry}: {msg}')


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass
