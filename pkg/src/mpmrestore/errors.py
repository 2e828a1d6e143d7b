"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible grid dimensions."""


class VolumeDataError(ValueError):
    """A volume file or its sidecar is malformed or holds invalid values."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class DescentError(RuntimeError):
    """An iterative solver increased its objective beyond tolerance.

    Carries the iteration trace gathered up to the failure so the run can
    be inspected post mortem.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class NoRegionsError(RuntimeError):
    """Bead extraction found no usable regions."""
