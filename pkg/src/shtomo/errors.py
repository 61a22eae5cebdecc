"""Exception hierarchy shared by every stage of the pipeline."""


class ShtomoError(Exception):
    """Base class for all errors raised by :mod:`shtomo`."""


class DimensionError(ShtomoError, ValueError):
    pass


class InvalidStateError(ShtomoError, ValueError):
    pass


class ArgumentError(ShtomoError, ValueError):
    pass


class SamplingError(ShtomoError):
    """Quadrature grid too coarse for the band limit of the integrand."""


class ApertureError(ShtomoError, ValueError):
    pass


class GeometryError(ShtomoError, ValueError):
    pass


class DegenerateDataError(ShtomoError, ValueError):
    pass


class ConfigError(ShtomoError, ValueError):
    pass


class ScenarioError(ShtomoError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
