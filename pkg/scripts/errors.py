"""
Exception hierarchy for the PCD forecaster
"""
from typing import Optional


class PCDError(Exception):
    """Root of every error raised by this package"""


class ContractError(PCDError, ValueError):
    """A documented precondition was violated"""


class DimensionError(ContractError):
    """Operand shapes do not fit the operation"""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NumericError(PCDError, ArithmeticError):
    """Non-finite values where finite ones are required"""

    def __init__(self, message: str, name: Optional[str] = None):
        self.name = name
        super().__init__(message)


class TrainingError(NumericError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")


class LoadError(PCDError, ValueError):
    def __init__(self, path: str, row: int, reason: str):
        self.path = path
        self.row = row
        super().__init__(f"{path}: row {row}: {reason}")
