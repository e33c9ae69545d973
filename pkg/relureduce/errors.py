"""relureduce/errors.py"""

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "ReluReduceError",
    "ConfigError",
    "GraphError",
    "TrainingError",
    "EquivalenceError",
]


class ReluReduceError(Exception):
    """Base class of every error raised by relureduce.
    Each subclass knows the exit code the command line returns for it.
    """

    exit_code = 1


class ConfigError(ReluReduceError, ValueError):
    """Invalid configuration, usage, or malformed input file"""

    exit_code = 2


class GraphError(ReluReduceError, ValueError):
    """Invalid graph: build, shape inference, validation or pass preconditions"""

    exit_code = 3

    def __init__(self, message: str, node_id: "str | None" = None) -> None:
        super().__init__(f"{node_id}: {message}" if node_id else message)
        self.node_id = node_id


class TrainingError(ReluReduceError, RuntimeError):
    """Training failed. `provenance` names the candidate that failed, if any."""

    exit_code = 4

    def __init__(self, message: str, provenance: str = "") -> None:
        super().__init__(f"{message} [{provenance}]" if provenance else message)
        self.provenance = provenance


class EquivalenceError(ReluReduceError):
    """A merged model does not compute the same function as its source"""

    exit_code = 5
