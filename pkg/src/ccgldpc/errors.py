"""Exception types shared across the package."""


class CcgldpcError(Exception):
    """Base class for package errors."""


class AnalysisError(CcgldpcError):
    """Raised when a density-evolution or transfer-function computation
    cannot produce a valid result (non-ergodic chain, divergent solve)."""


class InfeasibleError(CcgldpcError):
    """Raised when requested parameters admit no valid configuration
    (component rate out of range, integral equation unsatisfiable)."""
