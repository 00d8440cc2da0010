"""Exception types shared across the package."""


class PSPCError(Exception):
    """Base class for all errors raised by pspclab."""


class ShapeMismatch(PSPCError, ValueError):
    pass


class EmptyDataset(PSPCError, ValueError):
    pass


class RangeError(PSPCError, ValueError):
    pass


class FormatError(PSPCError, ValueError):
    pass


class ConfigError(PSPCError, ValueError):
    pass


class DomainError(PSPCError, ValueError):
    """A noise level or other real parameter lies outside its domain (e.g. t <= 0)."""


class DegenerateHeatmap(PSPCError, ValueError):
    pass


class UncoveredPixel(PSPCError, ValueError):
    """Some pixel is not covered by any crop of a patch set."""


class MissingData(PSPCError, LookupError):
    """An externally supplied tensor does not cover a requested (t, sample) cell."""

    def __init__(self, message, t_index=None, sample_index=None):
        super().__init__(message)
        self.t_index = t_index
        self.sample_index = sample_index
