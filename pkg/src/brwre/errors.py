"""Exception types shared across the package."""


class BrwreError(Exception):
    """Base class for all package errors."""


class ConfigError(BrwreError, ValueError):
    """Malformed model or experiment configuration."""


class ResourceLimitError(BrwreError):
    """A lattice, pair-walk or enumeration budget would be exceeded."""


class PopulationOverflowError(ResourceLimitError):
    """A site count or the total population would exceed 2**63 - 1."""


class NumericOverflowError(BrwreError, ArithmeticError):
    """Values left the double-precision range; use log-scale inputs."""


class EmptyPopulationError(BrwreError, ValueError):
    """Statistic requested for an extinct population."""


class UnsupportedMomentError(BrwreError, ValueError):
    pass


class InfiniteMomentError(BrwreError, ValueError):
    pass
