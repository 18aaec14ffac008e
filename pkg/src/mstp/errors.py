"""Exception types shared across the package.

Everything raised on purpose derives from ``MstpError`` so callers (and the
CLI) can catch one base class and turn it into a clean one-line message.
"""


class MstpError(Exception):
    """Base class for all deliberate failures in this package."""


class ShapeError(MstpError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(MstpError, ValueError):
    """A documented precondition was violated (bad argument, bad state)."""


class GraphError(MstpError, RuntimeError):
    """Autodiff graph misuse, e.g. backward through an already-consumed graph."""


class DegenerateDistributionError(MstpError, ValueError):
    """A probability normalisation had no finite mass to normalise."""


class RegistryError(MstpError, LookupError):
    """An id (tumor class, task, organ label, parameter name) is not registered."""


class GenerationError(MstpError, RuntimeError):
    """A synthetic case could not be realised under its recipe constraints."""


class FileFormatError(MstpError, ValueError):
    """A file on disk does not match the expected header or layout."""


class CheckpointError(MstpError, RuntimeError):
    """Checkpoint contents do not match the model being restored."""


class ConfigError(MstpError, ValueError):
    """A run configuration file or value is invalid."""


class OptimizerError(MstpError, RuntimeError):
    """The optimizer hit a non-finite update or missing gradient."""
