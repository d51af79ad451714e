"""Exception hierarchy shared by all engines.

Each class carries the CLI exit code it maps to, so the front door can turn
any failure into the documented status without a lookup table.
"""

from __future__ import annotations


class LiabvalError(Exception):
    exit_code = 1
    kind = "error"

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self), "details": self.details}


class StructuralError(LiabvalError):
    """Tree cannot be assembled: cycles, orphans, several roots, empty children."""

    exit_code = 2
    kind = "structural"


class TreeValidationError(LiabvalError):
    """Probability, martingale or positivity invariant violated."""

    exit_code = 2
    kind = "validation"


class DataError(LiabvalError):
    """Values missing or misaligned with the tree."""

    exit_code = 2
    kind = "data"


class MeasurabilityError(LiabvalError):
    """A stopping rule that is not adapted to the tree filtration."""

    exit_code = 2
    kind = "measurability"


class DegeneracyError(LiabvalError):
    """Replication problem is ill-posed (singular Gram matrix, risk-free direction)."""

    exit_code = 3
    kind = "degeneracy"


class GuardError(LiabvalError):
    """A desk-scale guard (enumeration size, horizon) was exceeded."""

    exit_code = 4
    kind = "guard"


class ModelError(LiabvalError):
    exit_code = 2
    kind = "model"


class ConvergenceWarning(UserWarning):
    """Optimizer stagnated across restarts; the best iterate is still returned."""


class ConfigError(LiabvalError):
    """Run configuration is malformed or points at missing inputs."""

    exit_code = 2
    kind = "config"
