"""Exception taxonomy. All failures raised by this package derive from FlowError."""


class FlowError(Exception):
    """Base class; message should be module-qualified, e.g. 'fflow.tensor: ...'."""


class NumericsError(FlowError):
    """NaN/Inf surfaced, non-scalar loss, bad dtype, or gradient misuse."""


class ShapeError(FlowError):
    """Operand shapes violate an operation's contract."""


class FrozenWeightsError(FlowError):
    """A frozen-weights contract was violated."""


class DataError(FlowError):
    """Dataset, caption, or file-format problem."""


class ConfigError(FlowError):
    """Invalid configuration value or key."""
