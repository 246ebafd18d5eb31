"""Exception hierarchy shared by every rowcnn module."""


class RowCNNError(Exception):
    pass


class InvalidShapeError(RowCNNError, ValueError):
    pass


class KernelExceedsInputError(InvalidShapeError):
    """The kernel is larger than the (padded) extent it must slide over."""


class ShapeUnderflowError(InvalidShapeError):
    pass


class InvalidLabelError(RowCNNError, ValueError):
    pass


class InvalidArgumentError(RowCNNError, ValueError):
    pass


class CorruptStateError(RowCNNError, RuntimeError):
    """Internal bookkeeping was violated (double free, stale tape, unconsumed carry...)."""


class ConfigError(RowCNNError, ValueError):
    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class InfeasiblePlanError(RowCNNError):
    """No row plan satisfies the requested constraints.

    ``bound`` names the violated constraint so callers can report it.
    """

    bound = "plan"

    def __init__(self, message, bound=None):
        super().__init__(message)
        if bound is not None:
            self.bound = bound


class InfeasibleBudgetError(InfeasiblePlanError):
    bound = "budget"


class OverlapExhaustionError(InfeasiblePlanError):
    bound = "overlap-exhaustion"


class DegeneratePartitionError(InfeasiblePlanError):
    bound = "degenerate-partition"


class DataFormatError(RowCNNError, ValueError):
    pass
