"""Exception types shared across the package."""


class TransferError(Exception):
    """Base class for all package errors."""


class ShapeError(TransferError, ValueError):
    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(TransferError, FloatingPointError):
    pass


class BackwardError(TransferError, RuntimeError):
    """Raised for a non-scalar root or a second backward pass over one graph."""


class DataError(TransferError):
    """Malformed, missing, or inconsistent input data."""


class ConfigError(TransferError):
    pass


class CheckpointError(TransferError):
    pass


class DivergenceError(TransferError):
    def __init__(self, stage, epoch, loss):
        self.stage = stage
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"{stage}: non-finite loss ({loss}) at epoch {epoch}")
