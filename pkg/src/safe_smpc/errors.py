"""Exception types raised across the package."""


class SafeSmpcError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(SafeSmpcError, ValueError):
    pass


class NonPsdCost(SafeSmpcError, ValueError):
    pass


class UnboundedOperand(SafeSmpcError, ValueError):
    pass


class SingularMap(SafeSmpcError, ValueError):
    pass


class UnstablePhi(SafeSmpcError):
    """Closed-loop matrix is not strictly Schur stable."""


class IterationLimit(SafeSmpcError):
    pass


class EmptyResult(SafeSmpcError):
    pass


class VertexEnumerationUnavailable(SafeSmpcError):
    """Vertex enumeration is only implemented up to two dimensions."""


class NotStabilizable(SafeSmpcError):
    pass


class BetaOutOfRange(SafeSmpcError, ValueError):
    pass


class EmptyTightenedSet(SafeSmpcError):
    def __init__(self, name: str, message: str | None = None):
        self.set_name = name
        super().__init__(message or f"tightened set {name} is empty")


class UnsafeStart(SafeSmpcError):
    """Backup problem infeasible at the current state."""


class InfeasibleController(SafeSmpcError):
    """A controller that is guaranteed recursively feasible became infeasible."""


class RejectionStall(SafeSmpcError):
    pass


class ConfigError(SafeSmpcError, ValueError):
    """Configuration file missing, malformed or inconsistent."""
