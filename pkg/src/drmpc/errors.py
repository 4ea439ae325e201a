class DimensionError(ValueError):
    """Raised when array shapes are mutually inconsistent."""


class ConfigError(ValueError):
    """Raised for invalid configuration (bad preset, bad parameter ranges)."""


class InsufficientDataError(RuntimeError):
    """Raised when the disturbance store cannot supply a full sample window."""


class SolverError(RuntimeError):
    """Raised when the QP solver cannot produce a usable answer."""
