"""Exception hierarchy shared by every otsi module."""


class OTSIError(Exception):
    """Base class for all errors raised by otsi."""


class InstanceError(OTSIError, ValueError):
    """Shapes or dimensions of the pieces of a problem do not agree."""


class InputError(OTSIError, ValueError):
    """Invalid values: NaN costs, negative plan entries, bad indices."""


class InfeasibleMaskError(OTSIError):
    """The allowed support of a masked transport problem cannot carry the marginals.

    Attributes
    ----------
    rows, cols : list of int
        Indices whose marginal mass cannot be routed through allowed cells.
    """

    def __init__(self, message, rows=(), cols=()):
        super().__init__(message)
        self.rows = list(rows)
        self.cols = list(cols)


class DegenerateGeometryError(OTSIError):
    """The mimic-loss denominator vanished (the uniform plan is already optimal)."""


class NumericalError(OTSIError):
    """Training produced a non-finite loss or gradient.

    ``last_good`` holds the last parameter vector for which everything was finite.
    """

    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


class ParseError(OTSIError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(OTSIError, ValueError):
    """A serialized model or config does not match the expected schema/version."""


class ConfigError(OTSIError, ValueError):
    """A run configuration is invalid."""
