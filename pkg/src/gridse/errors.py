"""Exception types shared across the package."""


class GridseError(Exception):
    pass


class ParseError(GridseError):
    """Malformed case file content (carries a line number where possible)."""


class ValidationError(GridseError):
    """Parsed data violates a structural invariant."""


class FormatError(GridseError):
    """Dataset/checkpoint stream is malformed or has an unsupported version."""


class SelectionError(GridseError):
    """Measurement selection references a bus or line that does not exist."""


class DimensionError(GridseError):
    """Operand dimensions do not match the model."""


class ConfigError(GridseError):
    """Invalid configuration value."""


class ConvergenceError(GridseError):
    """Iterative solver failed to converge."""

    def __init__(self, msg, mismatch=None):
        super().__init__(msg)
        self.mismatch = mismatch


class GenerationError(GridseError):
    """Scenario generation exhausted its retry budget."""


class IllPosedError(GridseError):
    """Normal matrix numerically singular; the estimation problem is ill-posed."""


class InitError(GridseError):
    """Model initialization failed (e.g. singular closed-form coefficients)."""


class NumericsError(GridseError):
    """Non-finite value encountered during computation."""
