"""Exception types with machine-readable codes (used by the CLI error record)."""

from __future__ import annotations

import numpy as np


class DeformhomError(Exception):
    code = "ERROR"

    def record(self) -> dict:
        return {"error": self.code, "message": str(self)}


class NotInDomainError(DeformhomError, ValueError):
    code = "NOT_IN_DOMAIN"

    def __init__(self, point):
        self.point = np.asarray(point, dtype=float)
        super().__init__(f"point {self.point.tolist()} is not in the meshed domain")


class SingularSystemError(DeformhomError, RuntimeError):
    code = "SINGULAR_SYSTEM"


class NonpositiveJacobianError(DeformhomError, ArithmeticError):
    code = "NONPOSITIVE_JACOBIAN"

    def __init__(self, jacobian, t=None, x=None, y=None, margin=None):
        self.jacobian = float(jacobian)
        self.t = t
        self.x = None if x is None else np.asarray(x, dtype=float).tolist()
        self.y = None if y is None else np.asarray(y, dtype=float).tolist()
        self.margin = None if margin is None else float(margin)
        super().__init__(
            f"non-positive Jacobian {self.jacobian:.6g} at t={t}, x={self.x}, y={self.y}, "
            f"validity margin M={self.margin}"
        )

    def record(self) -> dict:
        rec = super().record()
        rec.update(jacobian=self.jacobian, t=self.t, x=self.x, y=self.y, margin=self.margin)
        return rec
