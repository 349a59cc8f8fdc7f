"""Exception types. Each numerical failure carries the stage that raised it."""
from __future__ import annotations

from typing import Optional


class StackBSDEError(Exception):
    exit_code = 1

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self)}


class SchemaError(StackBSDEError):
    """Configuration does not match the scenario schema."""

    exit_code = 2


class StructuralError(SchemaError):
    """Inconsistent dimensions or missing fields in a spec."""


class NumericalError(StackBSDEError):
    exit_code = 3

    def __init__(self, message: str, stage: str, t: Optional[float] = None,
                 module: Optional[str] = None, operation: Optional[str] = None):
        self.stage = stage
        self.t = t
        self.module = module
        self.operation = operation
        where = f" at t={t:.6g}" if t is not None else ""
        super().__init__(f"[{stage}] {message}{where}")

    def to_dict(self):
        d = super().to_dict()
        d.update({"stage": self.stage, "t": self.t, "module": self.module, "operation": self.operation})
        return d


class SingularMatrixError(NumericalError):
    pass


class RiccatiEscape(NumericalError):
    pass


class DecouplingDegeneracy(SingularMatrixError):
    pass
