"""Exception types raised across the package."""


class BranchGateError(Exception):
    """Base class for all package errors."""


class ShapeError(BranchGateError, ValueError):
    """Two dimensions that must agree do not.

    ``what`` names the quantity, ``expected``/``got`` carry the offending sizes.
    """

    def __init__(self, what, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected {expected}, got {got}")


class LabelError(BranchGateError, ValueError):
    def __init__(self, index, label, num_classes):
        self.index = index
        self.label = label
        self.num_classes = num_classes
        super().__init__(
            f"label {label} at index {index} is outside [0, {num_classes})"
        )


class TapeError(BranchGateError, RuntimeError):
    """Backward was requested on a tape that has not recorded a forward pass."""


class ConfigError(BranchGateError, ValueError):
    """Invalid architecture or schedule configuration."""


class GateError(BranchGateError, ValueError):
    """Invalid gate configuration (fan-in out of range, unfrozen gates, ...)."""


class DivergenceError(BranchGateError, FloatingPointError):
    def __init__(self, step, loss, context=""):
        self.step = step
        self.loss = loss
        self.context = context
        where = f" ({context})" if context else ""
        super().__init__(f"non-finite loss {loss} at step {step}{where}")


class DataError(BranchGateError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class CheckpointError(BranchGateError, ValueError):
    """Checkpoint is unreadable: bad magic, version mismatch or checksum failure."""
