"""Exception hierarchy shared by every cmsnet module."""


class CMSNetError(Exception):
    """Base class for all errors raised by cmsnet."""


class ConfigError(CMSNetError, ValueError):
    """Invalid configuration, arguments or tensor shapes supplied by the caller."""


class DataError(CMSNetError):
    """Malformed or out-of-range input data (annotations, masks, files)."""


class ParseError(DataError):
    """A file could not be parsed; the message names the location."""


class NumericError(CMSNetError, ArithmeticError):
    """A NaN or Inf was produced where finite values are required."""


class MetricError(CMSNetError, ValueError):
    """A metric is undefined for the given confusion matrix."""
