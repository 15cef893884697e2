"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or incompatible artifacts."""


class DimensionError(ValueError):
    """Tensor shapes do not line up."""


class GraphError(RuntimeError):
    """Misuse of an autodiff graph (re-entrant backward, reuse)."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, seed=None):
        if seed is not None:
            message = f"{message} (seed={seed})"
        super().__init__(message)
        self.seed = seed


class SimulationError(RuntimeError):
    """The environment reached a non-finite state."""


class FormatError(ValueError):
    """A container file is malformed or has the wrong version."""
