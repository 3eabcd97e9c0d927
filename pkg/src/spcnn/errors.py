"""Exception hierarchy shared by every module.

The CLI maps :class:`ConfigurationError`, :class:`DataError` and
:class:`CheckpointError` to exit code 2 and :class:`NumericError` to exit
code 3.
"""


class SPCNNError(Exception):
    pass


class ConfigurationError(SPCNNError, ValueError):
    """Invalid geometry, hyperparameter or configuration file content."""


class DataError(SPCNNError, ValueError):
    """Bad dataset content: labels, manifests, image payloads."""


class StateError(SPCNNError, RuntimeError):
    """An operation was called with stale or missing internal state."""


class NumericError(SPCNNError, ArithmeticError):
    """Non-finite values appeared during training."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class CheckpointError(SPCNNError):
    pass


class CheckpointIOError(CheckpointError, OSError):
    pass


class CorruptCheckpointError(CheckpointError, ValueError):
    pass


class CheckpointVersionError(CheckpointError, ValueError):
    pass
