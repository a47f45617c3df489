"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class LayerRangeError(ValueError):
    """A decoder step was invoked at a layer where its rule is undefined."""


class ConvergenceError(RuntimeError):
    """Fixed-point iteration failed to reach the requested tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class IntegrationError(RuntimeError):
    """A solver step failed; ``step`` is the index of the failing step."""

    def __init__(self, step, cause):
        super().__init__(f"step {step}: {cause}")
        self.step = step


class TapeError(RuntimeError):
    """A gradient tape was used in an invalid state."""


class TrainingError(RuntimeError):
    """Training diverged or received unusable data."""
