"""Exception hierarchy.

Every error carries a short ``category`` used by the CLI to pick an exit code
and to tag the message printed on stderr.
"""


class HetpreError(Exception):
    category = "error"
    exit_code = 1


class GraphError(HetpreError):
    category = "graph"
    exit_code = 2


class DatasetFormatError(HetpreError):
    """A text dataset violates the ingestion format.

    ``path`` and ``line`` point at the offending location when known.
    """

    category = "format"
    exit_code = 3

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class ShapeMismatchError(HetpreError):
    category = "size-mismatch"
    exit_code = 4


class NumericalError(HetpreError):
    category = "numerical"
    exit_code = 5


class ConfigError(HetpreError):
    category = "config"
    exit_code = 6


class TrainingDiverged(NumericalError):
    """Raised when the loss becomes non-finite; keeps the last finite state."""

    def __init__(self, message, last_params=None, epoch=None):
        super().__init__(message)
        self.last_params = last_params
        self.epoch = epoch
